//! Load-flow based validation: nominal injections, multi-period load flow
//! and statutory or thermal limit checks.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::finding::{sort_findings, EntityKind, EntityRef, Finding, Severity};
use crate::grid::{to_per_unit, BranchKind, Grid, PerUnitError, VoltageLevel};
use crate::powerflow::{multi_period_loadflow, InjectionProfile, LoadFlowResult, Network, PowerFlowError, SolverOptions};
use crate::profiles::{reactive_from_pf, NormalizedCurve, DEFAULT_POWER_FACTOR};
use crate::rules::{run_basic_validation, RuleConfig};

pub const V_OUT_OF_BAND: &str = "v-out-of-band";
pub const LINE_OVERCURRENT: &str = "line-overcurrent";
pub const GCP_OVERCURRENT: &str = "gcp-overcurrent";
pub const LF_NONCONVERGENCE: &str = "lf-nonconvergence";

pub const ADVANCED_RULES: &[&str] = &[V_OUT_OF_BAND, LINE_OVERCURRENT, GCP_OVERCURRENT, LF_NONCONVERGENCE];

/// System base used for every load flow in this crate.
pub const DEFAULT_S_BASE_KVA: f64 = 100.0;

#[derive(Debug, Error)]
pub enum LfCheckError {
    #[error("load and PV curves differ: {load_steps} vs {pv_steps} steps, {load_dt} vs {pv_dt} h")]
    CurveMismatch {
        load_steps: usize,
        pv_steps: usize,
        load_dt: f64,
        pv_dt: f64,
    },
    #[error("expected installed PV for {expected} nodes, found {found}")]
    InstalledPvLength { expected: usize, found: usize },
    #[error("basic validation reported {errors} error finding(s); fix them first")]
    PrerequisiteFailed { errors: usize },
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error(transparent)]
    PerUnit(#[from] PerUnitError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSet {
    /// Allowed deviation from 1 pu at LV nodes.
    pub v_band_lv: f64,
    /// Allowed deviation from 1 pu at MV nodes.
    pub v_band_mv: f64,
    /// Current limit at the grid connection point in amperes. When absent
    /// it is derived from the transformer rating and LV base voltage.
    pub gcp_ampacity: Option<f64>,
}

impl Default for LimitSet {
    fn default() -> Self {
        Self {
            v_band_lv: 0.10,
            v_band_mv: 0.05,
            gcp_ampacity: None,
        }
    }
}

impl LimitSet {
    pub fn check(&self) -> Result<(), LfCheckError> {
        for (name, band) in [("v_band_lv", self.v_band_lv), ("v_band_mv", self.v_band_mv)] {
            if !(band > 0.0 && band < 0.2) {
                return Err(LfCheckError::InvalidLimits(format!("{name} = {band} outside (0, 0.2)")));
            }
        }
        if let Some(a) = self.gcp_ampacity {
            if !(a > 0.0) {
                return Err(LfCheckError::InvalidLimits(format!("gcp_ampacity = {a}")));
            }
        }
        Ok(())
    }

    pub fn band(&self, level: VoltageLevel) -> f64 {
        match level {
            VoltageLevel::LV => self.v_band_lv,
            VoltageLevel::MV => self.v_band_mv,
        }
    }
}

/// Net demand per node and step: `p̄·load − installed_pv·pv`. Reactive
/// power follows the load component at the default power factor; PV runs
/// at unity power factor.
pub fn synthesize_injections(
    grid: &Grid,
    load: &NormalizedCurve,
    pv: &NormalizedCurve,
    installed_pv_kw: &[f64],
) -> Result<InjectionProfile, LfCheckError> {
    if load.len() != pv.len() || (load.dt_hours() - pv.dt_hours()).abs() > 1e-12 {
        return Err(LfCheckError::CurveMismatch {
            load_steps: load.len(),
            pv_steps: pv.len(),
            load_dt: load.dt_hours(),
            pv_dt: pv.dt_hours(),
        });
    }
    if installed_pv_kw.len() != grid.nodes.len() {
        return Err(LfCheckError::InstalledPvLength {
            expected: grid.nodes.len(),
            found: installed_pv_kw.len(),
        });
    }
    let mut p_kw = Vec::with_capacity(grid.nodes.len());
    let mut q_kvar = Vec::with_capacity(grid.nodes.len());
    for (node, &alpha) in grid.nodes.iter().zip(installed_pv_kw) {
        let demand: Vec<f64> = load.values().iter().map(|l| node.nominal_power * l).collect();
        q_kvar.push(demand.iter().map(|&d| reactive_from_pf(d, DEFAULT_POWER_FACTOR)).collect());
        p_kw.push(demand.iter().zip(pv.values()).map(|(d, g)| d - alpha * g).collect());
    }
    Ok(InjectionProfile {
        p_kw,
        q_kvar,
        dt_hours: load.dt_hours(),
    })
}

/// Nominal-condition injections: full load curve and no PV.
pub fn nominal_injections(grid: &Grid, load: &NormalizedCurve) -> InjectionProfile {
    let zeros = NormalizedCurve::new(vec![0.0; load.len()], load.dt_hours()).expect("zero curve is valid");
    synthesize_injections(grid, load, &zeros, &vec![0.0; grid.nodes.len()]).expect("curves share their grid")
}

/// Worst violation seen so far for one entity under one rule.
struct Worst {
    finding: Finding,
    excess: f64,
}

fn keep_worst(map: &mut BTreeMap<(String, String), Worst>, finding: Finding, excess: f64) {
    let key = (finding.rule_id.clone(), finding.entity.id.clone());
    match map.get(&key) {
        Some(w) if w.excess >= excess => {}
        _ => {
            map.insert(key, Worst { finding, excess });
        }
    }
}

/// Current limit at the grid connection point in per unit of the
/// transformer branch's current base, if one applies.
fn gcp_limit_pu(net: &Network, b: usize, limits: &LimitSet) -> Option<f64> {
    let br = &net.grid.branches[b];
    match limits.gcp_ampacity {
        Some(amps) => Some(amps / br.i_base_amps),
        None => br.ampacity,
    }
}

/// Applies the voltage band and ampacity limits to every converged step.
/// Without `verbose`, findings are coalesced per entity and rule, keeping
/// the worst step; with it, every violating step is reported.
pub fn detect_anomalies(net: &Network, result: &LoadFlowResult, limits: &LimitSet, verbose: bool) -> Vec<Finding> {
    let mut all = Vec::new();
    let mut worst = BTreeMap::new();
    let mut emit = |f: Finding, excess: f64| {
        if verbose {
            all.push(f);
        } else {
            keep_worst(&mut worst, f, excess);
        }
    };

    let failed: Vec<usize> = (0..result.steps.len()).filter(|&t| !result.steps[t].converged).collect();
    for (t, step) in result.steps.iter().enumerate() {
        if !step.converged {
            continue;
        }
        for (node, v) in net.grid.nodes.iter().zip(&step.voltages) {
            let band = limits.band(node.voltage_level);
            let vm = v.norm();
            let (lo, hi) = (1.0 - band, 1.0 + band);
            if vm > hi || vm < lo {
                let bound = if vm > hi { hi } else { lo };
                let f = Finding::new(
                    V_OUT_OF_BAND,
                    Severity::Error,
                    EntityRef::new(EntityKind::Node, &node.id),
                    format!("|V| = {vm:.4} pu at node '{}' outside [{lo:.2}, {hi:.2}]", node.id),
                )
                .with_values(vm, bound)
                .at_step(t);
                emit(f, (vm - bound).abs());
            }
        }
        for (b, (br, i)) in net.grid.branches.iter().zip(&step.currents).enumerate() {
            let im = i.norm();
            let (rule, kind, limit) = match br.kind {
                BranchKind::Line => (LINE_OVERCURRENT, EntityKind::Line, br.ampacity),
                BranchKind::Transformer => (GCP_OVERCURRENT, EntityKind::Transformer, gcp_limit_pu(net, b, limits)),
            };
            let Some(limit) = limit else { continue };
            if im > limit {
                let amps = im * br.i_base_amps;
                let limit_amps = limit * br.i_base_amps;
                let f = Finding::new(
                    rule,
                    Severity::Error,
                    EntityRef::new(kind, &br.id),
                    format!("{:.1} A through '{}' exceeds {:.1} A", amps, br.id, limit_amps),
                )
                .with_values(amps, limit_amps)
                .at_step(t);
                emit(f, im / limit);
            }
        }
    }

    let mut findings = if verbose {
        all
    } else {
        worst.into_values().map(|w| w.finding).collect()
    };
    if let Some(&first) = failed.first() {
        findings.push(
            Finding::new(
                LF_NONCONVERGENCE,
                Severity::Error,
                EntityRef::new(EntityKind::Grid, "grid"),
                format!("load flow did not converge at {} of {} steps", failed.len(), result.steps.len()),
            )
            .with_values(failed.len() as f64, 0.0)
            .at_step(first),
        );
    }
    sort_findings(&mut findings);
    findings
}

/// Loadability limit of one step: the largest fraction of its demand that
/// still has a load-flow solution, and the weakest bus at that fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapsePoint {
    pub margin: f64,
    pub bus: usize,
    pub vmag: f64,
}

const COLLAPSE_BISECTIONS: usize = 30;

/// Scales `load` down by bisection until the load flow converges. Returns
/// `None` when even a vanishing demand fails or the full demand converges.
pub fn locate_collapse(net: &Network, load: &[Complex64], solver: &SolverOptions) -> Option<CollapsePoint> {
    let solve = |scale: f64| {
        let scaled: Vec<Complex64> = load.iter().map(|s| s * scale).collect();
        net.solve(&scaled, solver).ok().filter(|s| s.converged).map(|s| s.voltages)
    };
    if solve(1.0).is_some() {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = solve(0.0)?;
    for _ in 0..COLLAPSE_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        match solve(mid) {
            Some(v) => {
                lo = mid;
                best = v;
            }
            None => hi = mid,
        }
    }
    let slack = net.slack();
    let (bus, vmag) = best
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != slack)
        .map(|(i, v)| (i, v.norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    Some(CollapsePoint { margin: lo, bus, vmag })
}

/// Points the grid-level non-convergence finding at the weakest bus.
fn attribute_collapse(findings: &mut [Finding], net: &Network, c: &CollapsePoint) {
    let id = &net.grid.nodes[c.bus].id;
    for f in findings.iter_mut().filter(|f| f.rule_id == LF_NONCONVERGENCE && f.entity.kind == EntityKind::Grid) {
        f.entity = EntityRef::new(EntityKind::Node, id);
        f.message = format!(
            "{}; only {:.1} % of the demand is solvable, weakest node '{id}' at |V| = {:.3} pu",
            f.message,
            100.0 * c.margin,
            c.vmag
        );
    }
}

#[derive(Debug, Clone)]
pub struct AdvancedConfig {
    pub limits: LimitSet,
    pub load_curve: NormalizedCurve,
    pub rules: Option<RuleConfig>,
    pub solver: SolverOptions,
    pub s_base_kva: f64,
    pub verbose: bool,
}

impl AdvancedConfig {
    pub fn new(load_curve: NormalizedCurve) -> Self {
        Self {
            limits: LimitSet::default(),
            load_curve,
            rules: None,
            solver: SolverOptions::default(),
            s_base_kva: DEFAULT_S_BASE_KVA,
            verbose: false,
        }
    }
}

/// Builds the per-unit network for `grid`.
pub fn build_network(grid: &Grid, s_base_kva: f64) -> Result<Network, LfCheckError> {
    Ok(Network::new(to_per_unit(grid, s_base_kva)?)?)
}

/// Runs the load-flow validation under nominal demand. Refuses grids that
/// still carry error-severity basic findings.
pub fn run_advanced_validation(grid: &Grid, cfg: &AdvancedConfig) -> Result<Vec<Finding>, LfCheckError> {
    cfg.limits.check()?;
    let rules = cfg.rules.clone().unwrap_or_else(|| RuleConfig::for_grid(grid));
    let errors = run_basic_validation(grid, &rules).iter().filter(|f| f.is_error()).count();
    if errors > 0 {
        return Err(LfCheckError::PrerequisiteFailed { errors });
    }
    let net = build_network(grid, cfg.s_base_kva)?;
    let profile = nominal_injections(grid, &cfg.load_curve);
    match multi_period_loadflow(&net, &profile, &cfg.solver) {
        Ok(result) => {
            let mut findings = detect_anomalies(&net, &result, &cfg.limits, cfg.verbose);
            if let Some(first) = result.steps.iter().position(|s| !s.converged) {
                let load = profile.load_pu(first, net.grid.s_base_kva);
                if let Some(c) = locate_collapse(&net, &load, &cfg.solver) {
                    attribute_collapse(&mut findings, &net, &c);
                }
            }
            Ok(findings)
        }
        Err(PowerFlowError::SingularJacobian { bus }) => {
            let id = &net.grid.nodes[bus].id;
            Ok(vec![Finding::new(
                LF_NONCONVERGENCE,
                Severity::Error,
                EntityRef::new(EntityKind::Node, id),
                format!("node '{id}' is not connected to the slack; the load flow has no solution"),
            )])
        }
        Err(e) => Err(e.into()),
    }
}
