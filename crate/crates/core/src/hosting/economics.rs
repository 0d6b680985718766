use super::HostingError;

/// Days per year used to scale the representative daily profile.
pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EconomicParams {
    /// Turnkey PV cost in CHF/kWp.
    pub c_cap: f64,
    /// Project lifespan in years.
    pub lifespan_years: f64,
    /// Annual discount rate as a fraction.
    pub discount: f64,
    /// Retail tariff in CHF/kWh.
    pub c_plus: f64,
    /// Feed-in tariff in CHF/kWh.
    pub c_minus: f64,
}

impl Default for EconomicParams {
    fn default() -> Self {
        Self {
            c_cap: 1500.0,
            lifespan_years: 20.0,
            discount: 0.02,
            c_plus: 0.25,
            c_minus: 0.14,
        }
    }
}

impl EconomicParams {
    pub fn check(&self) -> Result<(), HostingError> {
        let positive = [
            ("c_cap", self.c_cap),
            ("discount", self.discount),
            ("c_plus", self.c_plus),
            ("c_minus", self.c_minus),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HostingError::InvalidParameter(format!("{name} = {v}")));
            }
        }
        if !(self.lifespan_years >= 0.0) {
            return Err(HostingError::InvalidParameter(format!("lifespan = {}", self.lifespan_years)));
        }
        if self.c_plus < self.c_minus {
            return Err(HostingError::ConvexityViolated {
                c_plus: self.c_plus,
                c_minus: self.c_minus,
            });
        }
        Ok(())
    }

    pub fn npv(&self) -> f64 {
        npv_factor(self.discount, self.lifespan_years)
    }

    /// Factor turning one day of operating cost into its lifetime present value.
    pub fn lifetime_factor(&self) -> f64 {
        DAYS_PER_YEAR * self.npv()
    }
}

/// Present value of one unit paid at the end of each of `years` years.
/// As `discount → 0` the factor tends to `years`.
pub fn npv_factor(discount: f64, years: f64) -> f64 {
    debug_assert!(discount > 0.0);
    (1.0 - (1.0 + discount).powf(-years)) / discount
}

pub fn capex(alpha_kw: &[f64], c_cap: f64) -> f64 {
    alpha_kw.iter().sum::<f64>() * c_cap
}

/// Energy cost of one net-demand sample `x` (kWh): imports at `c_plus`,
/// exports credited at `c_minus`.
pub fn energy_cost(x_kwh: f64, c_plus: f64, c_minus: f64) -> f64 {
    if x_kwh >= 0.0 {
        c_plus * x_kwh
    } else {
        c_minus * x_kwh
    }
}

/// Lifetime electricity bill of all candidates. `load_kw[c][t]` is the
/// demand of candidate `c`, `pv` the normalized PV curve.
pub fn opex_bill(alpha_kw: &[f64], load_kw: &[Vec<f64>], pv: &[f64], dt_hours: f64, econ: &EconomicParams) -> f64 {
    daily_bill(alpha_kw, load_kw, pv, dt_hours, econ) * econ.lifetime_factor()
}

/// One representative day of the bill, before annualization.
pub fn daily_bill(alpha_kw: &[f64], load_kw: &[Vec<f64>], pv: &[f64], dt_hours: f64, econ: &EconomicParams) -> f64 {
    alpha_kw
        .iter()
        .zip(load_kw)
        .map(|(&a, load)| {
            load.iter()
                .zip(pv)
                .map(|(&l, &g)| energy_cost((l - a * g) * dt_hours, econ.c_plus, econ.c_minus))
                .sum::<f64>()
        })
        .sum()
}

/// The two affine pieces bounding the epigraph variable of one sample:
/// `e ≥ c_plus·x` and `e ≥ c_minus·x`.
pub fn epigraph_pieces(econ: &EconomicParams) -> [f64; 2] {
    [econ.c_plus, econ.c_minus]
}

/// Smallest `e` satisfying both epigraph pieces at `x`.
pub fn epigraph_minimum(x: f64, econ: &EconomicParams) -> f64 {
    epigraph_pieces(econ).iter().map(|c| c * x).fold(f64::NEG_INFINITY, f64::max)
}

/// Sample variance of the per-unit allocation `α/p̄`.
pub fn unfairness(alpha_kw: &[f64], pbar_kw: &[f64]) -> Result<f64, HostingError> {
    if alpha_kw.len() < 2 {
        return Err(HostingError::DegenerateCandidateSet(alpha_kw.len()));
    }
    if let Some(p) = pbar_kw.iter().find(|&&p| !(p > 0.0)) {
        return Err(HostingError::InvalidParameter(format!("nominal power {p} at a candidate")));
    }
    let u: Vec<f64> = alpha_kw.iter().zip(pbar_kw).map(|(a, p)| a / p).collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    Ok(u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (u.len() - 1) as f64)
}
