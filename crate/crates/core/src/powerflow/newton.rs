//! Newton-Raphson load flow in rectangular coordinates.
//!
//! Every bus except the slack is a constant-PQ bus. Unknowns are the real
//! and imaginary voltage parts `(e, f)` of the non-slack buses; equations
//! are the active and reactive power mismatches at those buses.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{AdmittanceMatrix, PowerFlowError};

/// Newton gives up after this many iterations without cutting the best
/// mismatch by `STALL_RATIO`; past the loadability limit it never will.
const STALL_ITERATIONS: usize = 5;
const STALL_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest complex power mismatch, in pu.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub voltages: Vec<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Position of each bus in the unknown vector; `None` for the slack.
pub(crate) fn unknown_positions(order: usize, slack: usize) -> Vec<Option<usize>> {
    let mut k = 0;
    (0..order)
        .map(|i| {
            if i == slack {
                None
            } else {
                k += 1;
                Some(k - 1)
            }
        })
        .collect()
}

/// Complex power mismatch `S_calc + S_load` at every bus (zero at the slack).
pub fn power_mismatch(y: &AdmittanceMatrix, slack: usize, v: &[Complex64], load: &[Complex64]) -> Vec<Complex64> {
    let current = y.mul(v);
    (0..v.len())
        .map(|i| {
            if i == slack {
                Complex64::new(0.0, 0.0)
            } else {
                v[i] * current[i].conj() + load[i]
            }
        })
        .collect()
}

/// Jacobian of the `(P, Q)` injections of non-slack buses with respect to
/// `(e, f)`. Rows `2k, 2k+1` hold `P, Q` of unknown bus `k`; columns `2k,
/// 2k+1` hold `e, f`.
pub(crate) fn jacobian(y: &AdmittanceMatrix, v: &[Complex64], pos: &[Option<usize>]) -> DMatrix<f64> {
    let m = pos.iter().flatten().count();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    let current = y.mul(v);
    for (i, pi) in pos.iter().enumerate() {
        let Some(ki) = *pi else { continue };
        let (e, f) = (v[i].re, v[i].im);
        let (a, b) = (current[i].re, current[i].im);
        for &(k, yik) in y.row(i) {
            let Some(kk) = pos[k] else { continue };
            let (g, bb) = (yik.re, yik.im);
            jac[(2 * ki, 2 * kk)] += e * g + f * bb;
            jac[(2 * ki, 2 * kk + 1)] += f * g - e * bb;
            jac[(2 * ki + 1, 2 * kk)] += f * g - e * bb;
            jac[(2 * ki + 1, 2 * kk + 1)] += -f * bb - e * g;
        }
        jac[(2 * ki, 2 * ki)] += a;
        jac[(2 * ki, 2 * ki + 1)] += b;
        jac[(2 * ki + 1, 2 * ki)] -= b;
        jac[(2 * ki + 1, 2 * ki + 1)] += a;
    }
    jac
}

/// First bus (by index) that cannot be reached from the slack through
/// non-zero admittances.
pub fn find_islanded_bus(y: &AdmittanceMatrix, slack: usize) -> Option<usize> {
    let n = y.order();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([slack]);
    seen[slack] = true;
    while let Some(i) = queue.pop_front() {
        for &(j, yij) in y.row(i) {
            if j != i && !seen[j] && yij.norm() > 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.iter().position(|s| !s)
}

/// Solves one load-flow step from a flat start. `load` is the complex
/// consumption per bus in pu (positive = demand); the slack entry is
/// ignored. Non-convergence is reported through `converged = false`.
pub fn solve_loadflow(
    y: &AdmittanceMatrix,
    slack: usize,
    slack_voltage: Complex64,
    load: &[Complex64],
    opts: &SolverOptions,
) -> Result<StepSolution, PowerFlowError> {
    let n = y.order();
    if load.len() != n {
        return Err(PowerFlowError::DimensionMismatch {
            expected: n,
            found: load.len(),
        });
    }
    if load.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(PowerFlowError::NonFiniteInjection);
    }
    if let Some(bus) = find_islanded_bus(y, slack) {
        return Err(PowerFlowError::SingularJacobian { bus });
    }
    let pos = unknown_positions(n, slack);
    let mut v = vec![slack_voltage; n];
    let max_abs = |mis: &[Complex64]| mis.iter().map(|s| s.norm()).fold(0.0, f64::max);

    let mut mismatch = power_mismatch(y, slack, &v, load);
    let mut worst = max_abs(&mismatch);
    let mut iterations = 0;
    let mut best = worst;
    let mut stalled = 0;
    while worst >= opts.tolerance && iterations < opts.max_iterations && stalled < STALL_ITERATIONS {
        let jac = jacobian(y, &v, &pos);
        let rhs = DVector::from_iterator(
            jac.nrows(),
            (0..n).filter(|&i| i != slack).flat_map(|i| [-mismatch[i].re, -mismatch[i].im]),
        );
        let Some(dx) = jac.lu().solve(&rhs) else {
            return Err(PowerFlowError::SingularJacobian { bus: slack });
        };
        for (i, p) in pos.iter().enumerate() {
            if let Some(k) = *p {
                v[i] += Complex64::new(dx[2 * k], dx[2 * k + 1]);
            }
        }
        iterations += 1;
        mismatch = power_mismatch(y, slack, &v, load);
        worst = max_abs(&mismatch);
        if !worst.is_finite() {
            break;
        }
        if worst < STALL_RATIO * best {
            stalled = 0;
        } else {
            stalled += 1;
        }
        best = best.min(worst);
    }
    debug!("load flow: {iterations} iterations, mismatch {worst:.3e}");
    Ok(StepSolution {
        voltages: v,
        converged: worst < opts.tolerance,
        iterations,
        max_mismatch: worst,
    })
}
