//! Fair PV hosting-capacity allocation.
//!
//! Minimizes investment plus lifetime electricity bill plus `λ` times the
//! variance of the per-unit allocation, subject to linearized voltage,
//! ampacity and transformer constraints and to the nominal-power bound
//! `−p̄ ≤ P^L − αĜ ≤ p̄` at every step.

mod constraints;
mod economics;
mod qp;

use std::io::Write;

use log::{debug, info};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

pub use constraints::{
    build_grid_constraints, inscribed_radius, polygon_directions, prune, transformer_limit, ConstraintKind,
    LinearConstraint, POLYGON_SIDES,
};
pub use economics::{
    capex, daily_bill, energy_cost, epigraph_minimum, epigraph_pieces, npv_factor, opex_bill, unfairness,
    EconomicParams, DAYS_PER_YEAR,
};
pub use qp::{solve_qp, KktResidual, QpError, QpProblem, QpSettings, QpSolution};

use crate::grid::{BranchKind, Grid};
use crate::lfcheck::{synthesize_injections, LfCheckError, LimitSet};
use crate::powerflow::{multi_period_loadflow, Network, PowerFlowError, SolverOptions};
use crate::profiles::NormalizedCurve;
use crate::sensitivity::{compute_sensitivities, linearize_step, LinearizedStep, SensitivityError};

/// Largest accepted KKT residual of a reported solution.
pub const KKT_CERTIFICATE: f64 = 1e-6;
/// Successive linearization stops once no capacity moves more than this (kWp).
pub const REFINE_TOLERANCE_KW: f64 = 0.1;
pub const MAX_REFINE_PASSES: usize = 5;
/// Default fairness weights of a sweep, CHF/pu².
pub const DEFAULT_LAMBDAS: &[f64] = &[0.0, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6];

#[derive(Debug, Error)]
pub enum HostingError {
    #[error("retail tariff {c_plus} below feed-in tariff {c_minus}: the bill is not convex")]
    ConvexityViolated { c_plus: f64, c_minus: f64 },
    #[error("fairness needs at least two candidate nodes, got {0}")]
    DegenerateCandidateSet(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("hosting problem is infeasible (primal residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("solver stalled after {iterations} iterations with KKT residual {residual:.3e}")]
    SolverStall { iterations: usize, residual: f64 },
    #[error("load flow did not converge at step {step}")]
    NonConvergence { step: usize },
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Injection(#[from] LfCheckError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostingConfig {
    pub economics: EconomicParams,
    pub limits: LimitSet,
    /// Optional roof-potential cap per grid node (kWp), in grid node order.
    pub alpha_max_kw: Option<Vec<f64>>,
    pub polygon_sides: usize,
    pub solver: SolverOptions,
    pub qp: QpSettings,
}

impl Default for HostingConfig {
    fn default() -> Self {
        Self {
            economics: EconomicParams::default(),
            limits: LimitSet::default(),
            alpha_max_kw: None,
            polygon_sides: POLYGON_SIDES,
            solver: SolverOptions::default(),
            qp: QpSettings::default(),
        }
    }
}

/// Immutable hosting problem for one linearization point and one `λ`.
#[derive(Debug, Clone)]
pub struct HostingProblem {
    /// Bus indices of the candidate nodes.
    pub candidates: Vec<usize>,
    pub candidate_ids: Vec<String>,
    pub pbar_kw: Vec<f64>,
    /// Demand per candidate and step, kW.
    pub load_kw: Vec<Vec<f64>>,
    /// Normalized PV output per step.
    pub pv: Vec<f64>,
    pub dt_hours: f64,
    pub economics: EconomicParams,
    pub lambda: f64,
    /// Upper bound per candidate from the nominal-power bound and the
    /// optional roof cap.
    pub alpha_cap_kw: Vec<f64>,
    /// Grid constraints left after pruning.
    pub constraints: Vec<LinearConstraint>,
    /// Rows generated before pruning.
    pub raw_constraint_count: usize,
    /// Linearization point per candidate.
    pub alpha_ref_kw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostingSolution {
    pub lambda: f64,
    pub candidate_ids: Vec<String>,
    pub pbar_kw: Vec<f64>,
    pub alpha_kw: Vec<f64>,
    /// Investment cost, CHF.
    pub j_c: f64,
    /// Lifetime electricity bill, CHF.
    pub j_o: f64,
    /// Variance of `α/p̄`, pu².
    pub m_u: f64,
    pub total_kwp: f64,
    /// Optimal value as reported by the solver, CHF.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Linearization passes used.
    pub passes: usize,
    pub binding: Vec<String>,
}

impl HostingSolution {
    pub fn alpha_per_unit(&self) -> Vec<f64> {
        self.alpha_kw.iter().zip(&self.pbar_kw).map(|(a, p)| a / p).collect()
    }

    pub fn cost(&self) -> f64 {
        self.j_c + self.j_o
    }

    /// Objective recomputed from `α` with the exact piecewise bill.
    pub fn exact_objective(&self) -> f64 {
        self.j_c + self.j_o + self.lambda * self.m_u
    }
}

/// Load nodes other than the slack.
pub fn candidate_nodes(grid: &Grid) -> Vec<usize> {
    grid.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.nominal_power > 0.0 && n.id != grid.slack_node)
        .map(|(i, _)| i)
        .collect()
}

/// Largest `α` satisfying `P^L − αĜ ≥ −p̄` at every step. The other side
/// of the bound holds for any `α ≥ 0` because the load never exceeds `p̄`.
pub fn nominal_power_cap(load_kw: &[f64], pv: &[f64], pbar_kw: f64) -> f64 {
    load_kw
        .iter()
        .zip(pv)
        .filter(|(_, &g)| g > 0.0)
        .map(|(&l, &g)| (l + pbar_kw) / g)
        .fold(f64::INFINITY, f64::min)
}

fn daylight_steps(pv: &[f64]) -> Vec<usize> {
    (0..pv.len()).filter(|&t| pv[t] > 0.0).collect()
}

/// Load flow and sensitivities at every daylight step, with the PV plants
/// of `alpha_ref_kw` (grid node order) installed.
pub fn linearize_daylight(
    grid: &Grid,
    net: &Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    alpha_ref_kw: &[f64],
    solver: &SolverOptions,
) -> Result<Vec<LinearizedStep>, HostingError> {
    let profile = synthesize_injections(grid, load, pv, alpha_ref_kw)?;
    daylight_steps(pv.values())
        .into_par_iter()
        .map(|t| {
            let sol = net.solve(&profile.load_pu(t, net.grid.s_base_kva), solver)?;
            if !sol.converged {
                return Err(HostingError::NonConvergence { step: t });
            }
            let sens = compute_sensitivities(net, &sol.voltages, t)?;
            Ok(linearize_step(net, sens, &sol.voltages, pv.values()[t], alpha_ref_kw.to_vec()))
        })
        .collect()
}

impl HostingProblem {
    /// Linearizes the grid around the load-only operating point.
    pub fn build(
        grid: &Grid,
        net: &Network,
        load: &NormalizedCurve,
        pv: &NormalizedCurve,
        cfg: &HostingConfig,
        lambda: f64,
    ) -> Result<Self, HostingError> {
        Self::build_at(grid, net, load, pv, cfg, lambda, &vec![0.0; grid.nodes.len()])
    }

    /// Linearizes the grid around `alpha_ref_kw` (grid node order).
    pub fn build_at(
        grid: &Grid,
        net: &Network,
        load: &NormalizedCurve,
        pv: &NormalizedCurve,
        cfg: &HostingConfig,
        lambda: f64,
        alpha_ref_kw: &[f64],
    ) -> Result<Self, HostingError> {
        cfg.economics.check()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(HostingError::InvalidParameter(format!("lambda = {lambda}")));
        }
        let candidates = candidate_nodes(grid);
        if candidates.len() < 2 {
            return Err(HostingError::DegenerateCandidateSet(candidates.len()));
        }
        if load.len() != pv.len() || load.dt_hours() != pv.dt_hours() {
            return Err(LfCheckError::CurveMismatch {
                load_steps: load.len(),
                pv_steps: pv.len(),
                load_dt: load.dt_hours(),
                pv_dt: pv.dt_hours(),
            }
            .into());
        }
        let pbar_kw: Vec<f64> = candidates.iter().map(|&i| grid.nodes[i].nominal_power).collect();
        let load_kw: Vec<Vec<f64>> = pbar_kw.iter().map(|p| load.values().iter().map(|l| p * l).collect()).collect();
        let mut alpha_cap_kw: Vec<f64> = load_kw
            .iter()
            .zip(&pbar_kw)
            .map(|(l, &p)| nominal_power_cap(l, pv.values(), p))
            .collect();
        if let Some(max) = &cfg.alpha_max_kw {
            if max.len() != grid.nodes.len() {
                return Err(HostingError::InvalidParameter(format!(
                    "roof caps given for {} nodes, grid has {}",
                    max.len(),
                    grid.nodes.len()
                )));
            }
            for (cap, &n) in alpha_cap_kw.iter_mut().zip(&candidates) {
                *cap = cap.min(max[n]);
            }
        }

        let steps = linearize_daylight(grid, net, load, pv, alpha_ref_kw, &cfg.solver)?;
        let rows = build_grid_constraints(net, &steps, &candidates, &cfg.limits, cfg.polygon_sides);
        let raw_constraint_count = rows.len();
        let constraints = prune(rows, &alpha_cap_kw);
        debug!("hosting problem: {} of {} grid rows kept", constraints.len(), raw_constraint_count);
        Ok(Self {
            candidate_ids: candidates.iter().map(|&i| grid.nodes[i].id.clone()).collect(),
            alpha_ref_kw: candidates.iter().map(|&i| alpha_ref_kw[i]).collect(),
            candidates,
            pbar_kw,
            load_kw,
            pv: pv.values().to_vec(),
            dt_hours: pv.dt_hours(),
            economics: cfg.economics,
            lambda,
            alpha_cap_kw,
            constraints,
            raw_constraint_count,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    /// Capacities per grid node, zero outside the candidate set.
    pub fn expand(&self, alpha_kw: &[f64], node_count: usize) -> Vec<f64> {
        let mut full = vec![0.0; node_count];
        for (&n, &a) in self.candidates.iter().zip(alpha_kw) {
            full[n] = a;
        }
        full
    }

    /// Lifetime cost of the steps without sunshine, which no capacity changes.
    fn constant_cost(&self) -> f64 {
        let econ = &self.economics;
        let night: f64 = self
            .load_kw
            .iter()
            .map(|l| {
                l.iter()
                    .zip(&self.pv)
                    .filter(|(_, &g)| g <= 0.0)
                    .map(|(&x, _)| energy_cost(x * self.dt_hours, econ.c_plus, econ.c_minus))
                    .sum::<f64>()
            })
            .sum();
        night * econ.lifetime_factor()
    }

    fn objective_scale(&self) -> f64 {
        self.economics.c_cap * self.pbar_kw.iter().sum::<f64>()
    }

    /// Scaled QP over `u = α/p̄` and one epigraph variable per candidate and
    /// daylight step. Also returns a label per row for binding reports.
    fn assemble(&self) -> (QpProblem, Vec<Option<String>>) {
        let m = self.candidates.len();
        let days = daylight_steps(&self.pv);
        let econ = &self.economics;
        let sigma = self.objective_scale();
        let k_life = econ.lifetime_factor();
        let rho = econ.c_minus / econ.c_plus;

        let mut hessian = DMatrix::zeros(m, m);
        if self.lambda > 0.0 {
            let w = self.lambda * 2.0 / ((m - 1) as f64 * sigma);
            for i in 0..m {
                for j in 0..m {
                    let centre = if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64;
                    hessian[(i, j)] = w * centre;
                }
            }
        }
        let mut linear: Vec<f64> = self.pbar_kw.iter().map(|p| econ.c_cap * p / sigma).collect();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut labels = Vec::new();
        for c in 0..m {
            for (d, &t) in days.iter().enumerate() {
                let aux = m + c * days.len() + d;
                let g = self.pv[t];
                let l = self.load_kw[c][t] / self.pbar_kw[c];
                linear.push(k_life * econ.c_plus * self.pbar_kw[c] * self.dt_hours / sigma);
                rows.push(vec![(c, -g), (aux, -1.0)]);
                rhs.push(-l);
                rows.push(vec![(c, -rho * g), (aux, -1.0)]);
                rhs.push(-rho * l);
                labels.push(None);
                labels.push(None);
            }
        }
        for row in &self.constraints {
            let coeffs: Vec<f64> = row.coeffs.iter().zip(&self.pbar_kw).map(|(a, p)| a * p).collect();
            let norm = coeffs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if norm == 0.0 {
                continue;
            }
            rows.push(coeffs.iter().enumerate().map(|(j, v)| (j, v / norm)).collect());
            rhs.push(row.rhs / norm);
            labels.push(Some(row.to_string()));
        }
        for c in 0..m {
            let cap = self.alpha_cap_kw[c] / self.pbar_kw[c];
            if cap.is_finite() {
                rows.push(vec![(c, 1.0)]);
                rhs.push(cap);
                labels.push(Some(format!("capacity-cap {}", self.candidate_ids[c])));
            }
            rows.push(vec![(c, -1.0)]);
            rhs.push(0.0);
            labels.push(None);
        }
        let qp = QpProblem {
            n_dense: m,
            n_aux: m * days.len(),
            hessian,
            linear,
            rows,
            rhs,
        };
        (qp, labels)
    }

    /// Solves the QP and reports costs recomputed from `α`.
    pub fn solve(&self, settings: &QpSettings) -> Result<HostingSolution, HostingError> {
        let (qp, labels) = self.assemble();
        let sol = solve_qp(&qp, settings).map_err(|e| match e {
            QpError::Infeasible { residual } => HostingError::Infeasible { residual },
            QpError::Stall { iterations, residual } => HostingError::SolverStall { iterations, residual },
            QpError::Malformed(m) => HostingError::InvalidParameter(m),
        })?;
        let kkt = sol.kkt.max();
        if kkt > KKT_CERTIFICATE {
            return Err(HostingError::SolverStall {
                iterations: sol.iterations,
                residual: kkt,
            });
        }
        let m = self.candidates.len();
        let alpha_kw: Vec<f64> = (0..m).map(|c| (sol.x[c] * self.pbar_kw[c]).max(0.0)).collect();

        let ax: Vec<f64> = qp.rows.iter().map(|r| r.iter().map(|&(j, v)| v * sol.x[j]).sum()).collect();
        let zmax = sol.z.iter().fold(0.0f64, |a, b| a.max(*b));
        let mut binding: Vec<String> = labels
            .iter()
            .enumerate()
            .filter_map(|(r, label)| {
                let label = label.as_ref()?;
                let slack = qp.rhs[r] - ax[r];
                (slack < 1e-6 && sol.z[r] > 1e-8 * zmax.max(1.0)).then(|| label.clone())
            })
            .collect();
        binding.sort();

        let econ = &self.economics;
        let j_c = capex(&alpha_kw, econ.c_cap);
        let j_o = opex_bill(&alpha_kw, &self.load_kw, &self.pv, self.dt_hours, econ);
        let m_u = unfairness(&alpha_kw, &self.pbar_kw)?;
        Ok(HostingSolution {
            lambda: self.lambda,
            candidate_ids: self.candidate_ids.clone(),
            pbar_kw: self.pbar_kw.clone(),
            total_kwp: alpha_kw.iter().sum(),
            alpha_kw,
            j_c,
            j_o,
            m_u,
            objective: sol.objective * self.objective_scale() + self.constant_cost(),
            kkt_residual: kkt,
            iterations: sol.iterations,
            passes: 1,
            binding,
        })
    }
}

/// Solves with up to `passes` successive linearizations, each around the
/// previous optimum, stopping early once the allocation settles.
pub fn solve_hosting(
    grid: &Grid,
    net: &Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    cfg: &HostingConfig,
    lambda: f64,
    passes: usize,
) -> Result<HostingSolution, HostingError> {
    let problem = HostingProblem::build(grid, net, load, pv, cfg, lambda)?;
    refine(&problem, grid, net, load, pv, cfg, passes)
}

/// Continues from an already built (load-only) problem.
pub fn refine(
    problem: &HostingProblem,
    grid: &Grid,
    net: &Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    cfg: &HostingConfig,
    passes: usize,
) -> Result<HostingSolution, HostingError> {
    let passes = passes.clamp(1, MAX_REFINE_PASSES);
    let mut sol = problem.solve(&cfg.qp)?;
    for pass in 2..=passes {
        let at = problem.expand(&sol.alpha_kw, grid.nodes.len());
        let next = HostingProblem::build_at(grid, net, load, pv, cfg, problem.lambda, &at)?.solve(&cfg.qp)?;
        let moved = next
            .alpha_kw
            .iter()
            .zip(&sol.alpha_kw)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        info!("linearization pass {pass}: largest change {moved:.4} kWp");
        sol = HostingSolution { passes: pass, ..next };
        if moved < REFINE_TOLERANCE_KW {
            break;
        }
    }
    Ok(sol)
}

#[derive(Debug)]
pub struct SweepRow {
    pub lambda: f64,
    pub result: Result<HostingSolution, HostingError>,
}

/// Solves one problem per `λ` in parallel; failures stay in their row.
pub fn sweep_lambda(
    problem: &HostingProblem,
    lambdas: &[f64],
    settings: &QpSettings,
) -> Result<Vec<SweepRow>, HostingError> {
    check_lambdas(lambdas)?;
    Ok(lambdas
        .par_iter()
        .map(|&lambda| SweepRow {
            lambda,
            result: problem.with_lambda(lambda).solve(settings),
        })
        .collect())
}

/// Sweep with successive linearization per row.
pub fn sweep_lambda_refined(
    problem: &HostingProblem,
    grid: &Grid,
    net: &Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    cfg: &HostingConfig,
    lambdas: &[f64],
    passes: usize,
) -> Result<Vec<SweepRow>, HostingError> {
    check_lambdas(lambdas)?;
    Ok(lambdas
        .par_iter()
        .map(|&lambda| SweepRow {
            lambda,
            result: refine(&problem.with_lambda(lambda), grid, net, load, pv, cfg, passes),
        })
        .collect())
}

fn check_lambdas(lambdas: &[f64]) -> Result<(), HostingError> {
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(HostingError::InvalidParameter("fairness weights must be finite and non-negative".into()));
    }
    if lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(HostingError::InvalidParameter("fairness weights must be sorted ascending".into()));
    }
    Ok(())
}

/// Worst limit excess found by the full load flow at an allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub all_converged: bool,
    /// Largest distance outside the voltage band, pu (0 when inside).
    pub voltage_excess_pu: f64,
    /// Largest line current relative to ampacity, minus one (0 when within).
    pub current_excess: f64,
    /// Largest transformer apparent power relative to rating, minus one.
    pub transformer_excess: f64,
    pub min_vmag: f64,
    pub max_vmag: f64,
}

/// Re-solves the exact load flow over the whole day with `alpha_kw` (grid
/// node order) installed.
pub fn verify_nonlinear(
    grid: &Grid,
    net: &Network,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    alpha_kw: &[f64],
    limits: &LimitSet,
    solver: &SolverOptions,
) -> Result<FeasibilityReport, HostingError> {
    let profile = synthesize_injections(grid, load, pv, alpha_kw)?;
    let result = multi_period_loadflow(net, &profile, solver)?;
    let mut rep = FeasibilityReport {
        all_converged: result.all_converged(),
        voltage_excess_pu: 0.0,
        current_excess: 0.0,
        transformer_excess: 0.0,
        min_vmag: f64::INFINITY,
        max_vmag: 0.0,
    };
    let trafo = transformer_limit(net, limits);
    for step in result.steps.iter().filter(|s| s.converged) {
        for (i, (node, v)) in net.grid.nodes.iter().zip(&step.voltages).enumerate() {
            if i == net.grid.slack {
                continue;
            }
            let vm = v.norm();
            let band = limits.band(node.voltage_level);
            rep.min_vmag = rep.min_vmag.min(vm);
            rep.max_vmag = rep.max_vmag.max(vm);
            rep.voltage_excess_pu = rep.voltage_excess_pu.max(vm - 1.0 - band).max(1.0 - band - vm);
        }
        for (br, i) in net.grid.branches.iter().zip(&step.currents) {
            if let (BranchKind::Line, Some(limit)) = (br.kind, br.ampacity) {
                rep.current_excess = rep.current_excess.max(i.norm() / limit - 1.0);
            }
        }
        if let Some((_, limit)) = &trafo {
            rep.transformer_excess = rep.transformer_excess.max(step.slack_power.norm() / limit - 1.0);
        }
    }
    Ok(rep)
}

/// Per-candidate allocation as `node_id,alpha_kwp,alpha_per_unit`.
pub fn write_alpha_csv<W: Write>(sol: &HostingSolution, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node_id", "alpha_kwp", "alpha_per_unit"])?;
    for ((id, a), u) in sol.candidate_ids.iter().zip(&sol.alpha_kw).zip(sol.alpha_per_unit()) {
        w.write_record([id.clone(), format!("{a:.9}"), format!("{u:.9}")])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per successful sweep entry.
pub fn write_pareto_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "unfairness_pu2", "cost_chf", "total_kwp", "kkt_residual"])?;
    for row in rows {
        if let Ok(s) = &row.result {
            w.write_record([
                format!("{}", row.lambda),
                format!("{:.12e}", s.m_u),
                format!("{:.6}", s.cost()),
                format!("{:.6}", s.total_kwp),
                format!("{:.3e}", s.kkt_residual),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
