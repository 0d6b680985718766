use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use super::{Network, PowerFlowError, SolverOptions};

/// Nodal demand per time step. Positive values are consumption.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionProfile {
    /// Active power in kW, indexed `[node][step]`.
    pub p_kw: Vec<Vec<f64>>,
    /// Reactive power in kvar, indexed `[node][step]`.
    pub q_kvar: Vec<Vec<f64>>,
    /// Step duration in hours.
    pub dt_hours: f64,
}

impl InjectionProfile {
    pub fn steps(&self) -> usize {
        self.p_kw.first().map_or(0, Vec::len)
    }

    pub fn node_count(&self) -> usize {
        self.p_kw.len()
    }

    pub fn check(&self, node_count: usize) -> Result<(), PowerFlowError> {
        if !(self.dt_hours > 0.0) {
            return Err(PowerFlowError::InvalidTimeStep(self.dt_hours));
        }
        for table in [&self.p_kw, &self.q_kvar] {
            if table.len() != node_count {
                return Err(PowerFlowError::DimensionMismatch {
                    expected: node_count,
                    found: table.len(),
                });
            }
            for row in table {
                if row.len() != self.steps() {
                    return Err(PowerFlowError::DimensionMismatch {
                        expected: self.steps(),
                        found: row.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-unit complex demand of every node at one step.
    pub fn load_pu(&self, step: usize, s_base_kva: f64) -> Vec<Complex64> {
        self.p_kw
            .iter()
            .zip(&self.q_kvar)
            .map(|(p, q)| Complex64::new(p[step], q[step]) / s_base_kva)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub voltages: Vec<Complex64>,
    /// From-terminal branch currents, in branch order of the per-unit grid.
    pub currents: Vec<Complex64>,
    pub slack_power: Complex64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadFlowResult {
    pub steps: Vec<StepResult>,
    pub dt_hours: f64,
}

impl LoadFlowResult {
    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }
}

/// Solves every step independently (in parallel). Steps that fail to
/// converge are kept with `converged = false`.
pub fn multi_period_loadflow(
    net: &Network,
    profile: &InjectionProfile,
    opts: &SolverOptions,
) -> Result<LoadFlowResult, PowerFlowError> {
    profile.check(net.grid.node_count())?;
    let steps = (0..profile.steps())
        .into_par_iter()
        .map(|t| {
            let load = profile.load_pu(t, net.grid.s_base_kva);
            let sol = net.solve(&load, opts)?;
            Ok(StepResult {
                currents: net.branch_currents(&sol.voltages),
                slack_power: net.slack_power(&sol.voltages),
                voltages: sol.voltages,
                converged: sol.converged,
                iterations: sol.iterations,
            })
        })
        .collect::<Result<Vec<_>, PowerFlowError>>()?;
    Ok(LoadFlowResult {
        steps,
        dt_hours: profile.dt_hours,
    })
}

/// One row per node per step.
pub fn write_voltage_csv<W: Write>(net: &Network, result: &LoadFlowResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "node_id", "v_re_pu", "v_im_pu", "v_mag_pu", "v_angle_deg"])?;
    for (t, step) in result.steps.iter().enumerate() {
        for (node, v) in net.grid.nodes.iter().zip(&step.voltages) {
            w.write_record([
                t.to_string(),
                node.id.clone(),
                format!("{:.9}", v.re),
                format!("{:.9}", v.im),
                format!("{:.9}", v.norm()),
                format!("{:.6}", v.arg().to_degrees()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per branch per step; loading is relative to the branch ampacity
/// when known.
pub fn write_current_csv<W: Write>(net: &Network, result: &LoadFlowResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "branch_id", "i_re_pu", "i_im_pu", "i_mag_pu", "i_amps", "loading_pct"])?;
    for (t, step) in result.steps.iter().enumerate() {
        for (br, i) in net.grid.branches.iter().zip(&step.currents) {
            let loading = br
                .ampacity
                .map(|a| format!("{:.4}", 100.0 * i.norm() / a))
                .unwrap_or_default();
            w.write_record([
                t.to_string(),
                br.id.clone(),
                format!("{:.9}", i.re),
                format!("{:.9}", i.im),
                format!("{:.9}", i.norm()),
                format!("{:.4}", i.norm() * br.i_base_amps),
                loading,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
