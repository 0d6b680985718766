//! Voltage- and current-magnitude sensitivities to nodal active power.
//!
//! The nodal power equations `S_i = V_i·conj(Σ_k Y_ik V_k)` are
//! differentiated with respect to the active demand `P_n` of each bus,
//! holding the slack voltage and all reactive demands fixed. The resulting
//! linear system shares its matrix with the Newton load-flow Jacobian.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::powerflow::{jacobian, unknown_positions, Network};

/// Below this current magnitude the derivative of `|I|` is replaced by the
/// modulus of the complex current derivative.
pub const ZERO_CURRENT: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SensitivityError {
    #[error("singular sensitivity system at step {step}")]
    SingularSystem { step: usize },
    #[error("expected {expected} voltages, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Sensitivities at one operating point, all in pu per pu of demand.
/// Column `n` refers to an increase of the active demand at bus `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySet {
    pub step: usize,
    /// `∂|V_i|/∂P_n`, N×N. The slack row and column are zero.
    pub dv_dp: DMatrix<f64>,
    /// `∂|I_b|/∂P_n`, B×N, for from-terminal currents.
    pub di_dp: DMatrix<f64>,
    /// `∂I_b/∂P_n` as complex numbers, B×N.
    pub di_dp_complex: DMatrix<Complex64>,
    pub dp_slack_dp: Vec<f64>,
    pub dq_slack_dp: Vec<f64>,
}

pub fn compute_sensitivities(
    net: &Network,
    voltages: &[Complex64],
    step: usize,
) -> Result<SensitivitySet, SensitivityError> {
    let n = net.grid.node_count();
    if voltages.len() != n {
        return Err(SensitivityError::DimensionMismatch {
            expected: n,
            found: voltages.len(),
        });
    }
    let slack = net.slack();
    let pos = unknown_positions(n, slack);
    let m = n - 1;
    let lu = jacobian(&net.ybus, voltages, &pos).lu();

    // dV for each demand column; the slack column stays zero
    let mut dv = DMatrix::<Complex64>::zeros(n, n);
    for (col, p) in pos.iter().enumerate() {
        let Some(k) = *p else { continue };
        let mut rhs = DVector::zeros(2 * m);
        rhs[2 * k] = -1.0;
        let x = lu.solve(&rhs).ok_or(SensitivityError::SingularSystem { step })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SensitivityError::SingularSystem { step });
        }
        for (i, pi) in pos.iter().enumerate() {
            if let Some(ki) = *pi {
                dv[(i, col)] = Complex64::new(x[2 * ki], x[2 * ki + 1]);
            }
        }
    }

    let dv_dp = DMatrix::from_fn(n, n, |i, col| {
        let v = voltages[i];
        (v.conj() * dv[(i, col)]).re / v.norm()
    });

    let branches = &net.grid.branches;
    let currents = net.branch_currents(voltages);
    let di_dp_complex = DMatrix::from_fn(branches.len(), n, |b, col| {
        let br = &branches[b];
        net.branch_current_from(b, dv[(br.from, col)], dv[(br.to, col)])
    });
    let di_dp = DMatrix::from_fn(branches.len(), n, |b, col| {
        let i = currents[b];
        let di = di_dp_complex[(b, col)];
        if i.norm() < ZERO_CURRENT {
            di.norm()
        } else {
            (i.conj() * di).re / i.norm()
        }
    });

    let vs = voltages[slack];
    let row = net.ybus.row(slack);
    let mut dp_slack_dp = vec![0.0; n];
    let mut dq_slack_dp = vec![0.0; n];
    for col in 0..n {
        let di: Complex64 = row.iter().map(|&(k, y)| y * dv[(k, col)]).sum();
        let ds = vs * di.conj();
        dp_slack_dp[col] = ds.re;
        dq_slack_dp[col] = ds.im;
    }

    Ok(SensitivitySet {
        step,
        dv_dp,
        di_dp,
        di_dp_complex,
        dp_slack_dp,
        dq_slack_dp,
    })
}

/// Predicted electrical quantities for a PV allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub vmag: Vec<f64>,
    pub imag: Vec<f64>,
    pub currents: Vec<Complex64>,
    pub slack_power: Complex64,
}

/// Affine model of one time step around a reference PV allocation.
///
/// A PV plant of `α_n` kWp at bus `n` lowers the demand by `α_n·Ĝ_t`, so
/// `|V_i|(α) = |V_i|₀ − Σ_n ∂|V_i|/∂P_n · Ĝ_t · (α_n − α_ref,n) / S_base`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub step: usize,
    /// Normalized PV output `Ĝ_t` at this step.
    pub irradiance: f64,
    pub s_base_kva: f64,
    /// Allocation (kWp per bus) at which the model was built.
    pub alpha_ref_kw: Vec<f64>,
    pub base_vmag: Vec<f64>,
    pub base_currents: Vec<Complex64>,
    pub base_imag: Vec<f64>,
    pub base_slack: Complex64,
    pub sens: SensitivitySet,
}

pub fn linearize_step(
    net: &Network,
    sens: SensitivitySet,
    voltages: &[Complex64],
    irradiance: f64,
    alpha_ref_kw: Vec<f64>,
) -> LinearizedStep {
    let currents = net.branch_currents(voltages);
    LinearizedStep {
        step: sens.step,
        irradiance,
        s_base_kva: net.grid.s_base_kva,
        alpha_ref_kw,
        base_vmag: voltages.iter().map(|v| v.norm()).collect(),
        base_imag: currents.iter().map(|i| i.norm()).collect(),
        base_currents: currents,
        base_slack: net.slack_power(voltages),
        sens,
    }
}

impl LinearizedStep {
    /// Demand change (pu) per kWp installed at any bus.
    fn demand_per_kwp(&self) -> f64 {
        -self.irradiance / self.s_base_kva
    }

    /// `∂|V_i|/∂α_n` in pu per kWp.
    pub fn vmag_per_kwp(&self, i: usize, n: usize) -> f64 {
        self.sens.dv_dp[(i, n)] * self.demand_per_kwp()
    }

    /// `∂|I_b|/∂α_n` in pu per kWp.
    pub fn imag_per_kwp(&self, b: usize, n: usize) -> f64 {
        self.sens.di_dp[(b, n)] * self.demand_per_kwp()
    }

    /// `∂I_b/∂α_n` (complex) in pu per kWp.
    pub fn current_per_kwp(&self, b: usize, n: usize) -> Complex64 {
        self.sens.di_dp_complex[(b, n)] * self.demand_per_kwp()
    }

    /// `∂S_slack/∂α_n` in pu per kWp.
    pub fn slack_per_kwp(&self, n: usize) -> Complex64 {
        Complex64::new(self.sens.dp_slack_dp[n], self.sens.dq_slack_dp[n]) * self.demand_per_kwp()
    }

    pub fn predict(&self, alpha_kw: &[f64]) -> Prediction {
        let delta: Vec<f64> = alpha_kw.iter().zip(&self.alpha_ref_kw).map(|(a, r)| a - r).collect();
        let active: Vec<usize> = (0..delta.len()).filter(|&n| delta[n] != 0.0).collect();
        let vmag = (0..self.base_vmag.len())
            .map(|i| self.base_vmag[i] + active.iter().map(|&n| self.vmag_per_kwp(i, n) * delta[n]).sum::<f64>())
            .collect();
        let imag = (0..self.base_imag.len())
            .map(|b| self.base_imag[b] + active.iter().map(|&n| self.imag_per_kwp(b, n) * delta[n]).sum::<f64>())
            .collect();
        let currents = (0..self.base_currents.len())
            .map(|b| {
                self.base_currents[b]
                    + active
                        .iter()
                        .map(|&n| self.current_per_kwp(b, n) * delta[n])
                        .sum::<Complex64>()
            })
            .collect();
        let slack_power = self.base_slack + active.iter().map(|&n| self.slack_per_kwp(n) * delta[n]).sum::<Complex64>();
        Prediction {
            vmag,
            imag,
            currents,
            slack_power,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BranchKind, PerUnitBranch, PerUnitGrid, PerUnitNode, VoltageLevel};
    use crate::powerflow::SolverOptions;

    fn two_bus(r: f64) -> Network {
        let node = |id: &str| PerUnitNode {
            id: id.into(),
            base_kv: 0.4,
            voltage_level: VoltageLevel::LV,
            nominal_power: 0.0,
        };
        Network::new(PerUnitGrid {
            s_base_kva: 100.0,
            nodes: vec![node("a"), node("b")],
            slack: 0,
            branches: vec![PerUnitBranch {
                id: "l".into(),
                kind: BranchKind::Line,
                from: 0,
                to: 1,
                z: Complex64::new(r, 0.0),
                b_shunt: 0.0,
                tap: 1.0,
                ampacity: Some(1.0),
                ampacity_amps: Some(144.0),
                z_base_ohm: 1.6,
                i_base_amps: 144.3,
            }],
        })
        .unwrap()
    }

    #[test]
    fn two_bus_closed_form() {
        let net = two_bus(0.05);
        let load = [Complex64::new(0.0, 0.0), Complex64::new(0.1, 0.0)];
        let sol = net.solve(&load, &SolverOptions::default()).unwrap();
        let s = compute_sensitivities(&net, &sol.voltages, 0).unwrap();
        let v = sol.voltages[1].re;
        // differentiate V^2 - V + R P = 0
        assert!((s.dv_dp[(1, 1)] + 0.05 / (2.0 * v - 1.0)).abs() < 1e-9);
        assert_eq!(s.dv_dp[(0, 1)], 0.0);
        assert_eq!(s.dv_dp[(1, 0)], 0.0);
        // the single branch carries the load: |I| = P / V
        let di = -0.1 / (v * v) * s.dv_dp[(1, 1)] + 1.0 / v;
        assert!((s.di_dp[(0, 1)] - di).abs() < 1e-9);
        assert!(s.dp_slack_dp[1] > 1.0);
    }

    #[test]
    fn predictor_is_affine_through_base() {
        let net = two_bus(0.05);
        let load = [Complex64::new(0.0, 0.0), Complex64::new(0.1, 0.03)];
        let sol = net.solve(&load, &SolverOptions::default()).unwrap();
        let s = compute_sensitivities(&net, &sol.voltages, 3).unwrap();
        let lin = linearize_step(&net, s, &sol.voltages, 0.8, vec![0.0; 2]);
        let base = lin.predict(&[0.0, 0.0]);
        assert_eq!(base.vmag, lin.base_vmag);
        assert_eq!(base.slack_power, lin.base_slack);
        let one = lin.predict(&[0.0, 1.0]);
        let two = lin.predict(&[0.0, 2.0]);
        let d1 = one.vmag[1] - base.vmag[1];
        let d2 = two.vmag[1] - base.vmag[1];
        assert!(d1 > 0.0);
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
    }

    #[test]
    fn zero_current_uses_modulus() {
        let net = two_bus(0.05);
        let v = vec![Complex64::new(1.0, 0.0); 2];
        let s = compute_sensitivities(&net, &v, 0).unwrap();
        assert!(s.di_dp[(0, 1)] > 0.0);
        assert!((s.di_dp[(0, 1)] - s.di_dp_complex[(0, 1)].norm()).abs() < 1e-15);
    }
}
