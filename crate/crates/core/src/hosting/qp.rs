//! Primal-dual interior-point method (Mehrotra predictor-corrector) for
//! convex QPs whose variables split into a small dense block and many
//! auxiliary variables.
//!
//! Problem form: minimize `½ xᵀQx + cᵀx` subject to `Ax ≤ b`, where `Q` is
//! nonzero only on the dense block and every row of `A` touches at most one
//! auxiliary variable. The normal matrix is then block-arrow shaped with a
//! diagonal auxiliary block, so each Newton step reduces to one dense
//! Cholesky solve of the size of the dense block.

use log::debug;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("problem is primal infeasible (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("no convergence after {iterations} iterations (KKT residual {residual:.3e})")]
    Stall { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub n_dense: usize,
    pub n_aux: usize,
    /// Hessian of the dense block, positive semidefinite.
    pub hessian: DMatrix<f64>,
    /// Linear cost over all `n_dense + n_aux` variables.
    pub linear: Vec<f64>,
    /// Sparse rows of `A` as `(variable, coefficient)` pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Target for every scaled residual.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 150,
        }
    }
}

/// Scaled optimality residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the rows of `A`.
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktResidual,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.n_dense + self.n_aux
    }

    fn check(&self) -> Result<(), QpError> {
        let bad = |m: String| Err(QpError::Malformed(m));
        if self.hessian.nrows() != self.n_dense || self.hessian.ncols() != self.n_dense {
            return bad("hessian size".into());
        }
        if self.linear.len() != self.n() || self.rows.len() != self.rhs.len() {
            return bad("vector sizes".into());
        }
        let mut touched = vec![false; self.n_aux];
        for (r, row) in self.rows.iter().enumerate() {
            let mut aux = 0;
            for &(j, v) in row {
                if j >= self.n() || !v.is_finite() {
                    return bad(format!("row {r}: bad entry ({j}, {v})"));
                }
                if j >= self.n_dense {
                    aux += 1;
                    touched[j - self.n_dense] = true;
                }
            }
            if aux > 1 {
                return bad(format!("row {r} couples {aux} auxiliary variables"));
            }
        }
        if let Some(k) = touched.iter().position(|t| !t) {
            return bad(format!("auxiliary variable {k} appears in no row"));
        }
        if self.rhs.iter().chain(&self.linear).any(|v| !v.is_finite()) {
            return bad("non-finite data".into());
        }
        Ok(())
    }

    fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        self.rows[r].iter().map(|&(j, v)| v * x[j]).sum()
    }

    fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows.len()).map(|r| self.row_dot(r, x)).collect()
    }

    fn at_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (row, &yr) in self.rows.iter().zip(y) {
            for &(j, v) in row {
                out[j] += v * yr;
            }
        }
        out
    }

    fn q_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        let xd = DVector::from_column_slice(&x[..self.n_dense]);
        let q = &self.hessian * xd;
        out[..self.n_dense].copy_from_slice(q.as_slice());
        out
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let qx = self.q_mul(x);
        x.iter().zip(&qx).map(|(a, b)| 0.5 * a * b).sum::<f64>() + x.iter().zip(&self.linear).map(|(a, c)| a * c).sum::<f64>()
    }

    /// Scaled residuals of `(x, z)`: stationarity relative to the cost
    /// vector, bound violation relative to `b`, and the largest product of
    /// a multiplier with its row slack.
    pub fn kkt_residual(&self, x: &[f64], z: &[f64]) -> KktResidual {
        let qx = self.q_mul(x);
        let atz = self.at_mul(z);
        let c_norm = self.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let b_norm = self.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let stationarity = (0..self.n())
            .map(|j| (qx[j] + self.linear[j] + atz[j]).abs())
            .fold(0.0, f64::max)
            / (1.0 + c_norm);
        let ax = self.a_mul(x);
        let primal = ax.iter().zip(&self.rhs).map(|(a, b)| (a - b).max(0.0)).fold(0.0, f64::max) / (1.0 + b_norm);
        let complementarity = ax
            .iter()
            .zip(&self.rhs)
            .zip(z)
            .map(|((a, b), zi)| (zi * (b - a)).abs())
            .fold(0.0, f64::max);
        KktResidual {
            stationarity,
            primal,
            complementarity,
        }
    }
}

/// Factorized reduced normal matrix for one interior-point iteration.
struct NormalSystem {
    schur: DMatrix<f64>,
    cross: DMatrix<f64>,
    aux_diag: Vec<f64>,
    n_dense: usize,
}

impl NormalSystem {
    fn build(p: &QpProblem, w: &[f64]) -> Self {
        let nd = p.n_dense;
        let mut dense = p.hessian.clone();
        let mut cross = DMatrix::zeros(nd, p.n_aux);
        let mut aux_diag = vec![0.0; p.n_aux];
        let mut dense_entries: Vec<(usize, f64)> = Vec::with_capacity(nd);
        for (row, &wr) in p.rows.iter().zip(w) {
            dense_entries.clear();
            let mut aux = None;
            for &(j, v) in row {
                if j < nd {
                    dense_entries.push((j, v));
                } else {
                    aux = Some((j - nd, v));
                }
            }
            for &(i, vi) in &dense_entries {
                let wvi = wr * vi;
                for &(j, vj) in &dense_entries {
                    dense[(i, j)] += wvi * vj;
                }
            }
            if let Some((k, vk)) = aux {
                aux_diag[k] += wr * vk * vk;
                for &(i, vi) in &dense_entries {
                    cross[(i, k)] += wr * vi * vk;
                }
            }
        }
        let mut schur = dense;
        for k in 0..p.n_aux {
            let d = aux_diag[k];
            for i in 0..nd {
                let ci = cross[(i, k)];
                if ci == 0.0 {
                    continue;
                }
                for j in 0..nd {
                    schur[(i, j)] -= ci * cross[(j, k)] / d;
                }
            }
        }
        Self {
            schur,
            cross,
            aux_diag,
            n_dense: nd,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let nd = self.n_dense;
        let mut r_dense = DVector::from_column_slice(&rhs[..nd]);
        for (k, d) in self.aux_diag.iter().enumerate() {
            let rk = rhs[nd + k] / d;
            for i in 0..nd {
                r_dense[i] -= self.cross[(i, k)] * rk;
            }
        }
        let dx = solve_spd(&self.schur, &r_dense)?;
        let mut out = dx.as_slice().to_vec();
        for (k, d) in self.aux_diag.iter().enumerate() {
            let coupled: f64 = (0..nd).map(|i| self.cross[(i, k)] * dx[i]).sum();
            out.push((rhs[nd + k] - coupled) / d);
        }
        Some(out)
    }
}

fn solve_spd(m: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    if m.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut delta = 0.0;
    for _ in 0..8 {
        let mut reg = m.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += delta;
        }
        if let Some(ch) = reg.cholesky() {
            let x = ch.solve(r);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        delta = if delta == 0.0 { 1e-14 * scale } else { delta * 100.0 };
    }
    m.clone().lu().solve(r)
}

/// Largest step in (0, 1] keeping `v + step·dv ≥ 0`, damped by `fraction`.
fn max_step(v: &[f64], dv: &[f64], fraction: f64) -> f64 {
    let mut step: f64 = 1.0;
    for (&vi, &di) in v.iter().zip(dv) {
        if di < 0.0 {
            step = step.min(-fraction * vi / di);
        }
    }
    step
}

pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    p.check()?;
    let n = p.n();
    let m = p.rows.len();
    let mut x = vec![0.0; n];
    let ax = p.a_mul(&x);
    let mut s: Vec<f64> = ax.iter().zip(&p.rhs).map(|(a, b)| (b - a).max(1.0)).collect();
    let mut z = vec![1.0; m];
    let c_norm = p.linear.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let b_norm = p.rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for iter in 0..settings.max_iterations {
        let qx = p.q_mul(&x);
        let atz = p.at_mul(&z);
        let rd: Vec<f64> = (0..n).map(|j| qx[j] + p.linear[j] + atz[j]).collect();
        let ax = p.a_mul(&x);
        let rp: Vec<f64> = (0..m).map(|i| ax[i] + s[i] - p.rhs[i]).collect();
        let mu = if m == 0 { 0.0 } else { s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / m as f64 };

        let inf = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let kkt = p.kkt_residual(&x, &z);
        let merit = kkt.max().max(inf(&rp) / (1.0 + b_norm));
        if best.as_ref().map_or(true, |(r, _, _)| merit < *r) {
            best = Some((merit, x.clone(), z.clone()));
        }
        if inf(&rd) / (1.0 + c_norm) <= settings.tolerance
            && inf(&rp) / (1.0 + b_norm) <= settings.tolerance
            && mu <= settings.tolerance
        {
            debug!("interior point converged in {iter} iterations");
            return Ok(QpSolution {
                objective: p.objective(&x),
                kkt: p.kkt_residual(&x, &z),
                x,
                z,
                iterations: iter,
            });
        }

        let w: Vec<f64> = s.iter().zip(&z).map(|(si, zi)| zi / si).collect();
        let normal = NormalSystem::build(p, &w);

        // direction for a given complementarity target `rc` (s∘z − target)
        let direction = |rc: &[f64]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let tmp: Vec<f64> = (0..m).map(|i| rc[i] / s[i] - w[i] * rp[i]).collect();
            let at_tmp = p.at_mul(&tmp);
            let rhs: Vec<f64> = (0..n).map(|j| -rd[j] + at_tmp[j]).collect();
            let dx = normal.solve(&rhs)?;
            let adx = p.a_mul(&dx);
            let dz: Vec<f64> = (0..m).map(|i| (-rc[i] + z[i] * (rp[i] + adx[i])) / s[i]).collect();
            let ds: Vec<f64> = (0..m).map(|i| -rp[i] - adx[i]).collect();
            Some((dx, ds, dz))
        };

        let rc_aff: Vec<f64> = (0..m).map(|i| s[i] * z[i]).collect();
        let Some((_, ds_a, dz_a)) = direction(&rc_aff) else { break };
        let a_p = max_step(&s, &ds_a, 1.0);
        let a_d = max_step(&z, &dz_a, 1.0);
        let mu_aff = if m == 0 {
            0.0
        } else {
            (0..m).map(|i| (s[i] + a_p * ds_a[i]) * (z[i] + a_d * dz_a[i])).sum::<f64>() / m as f64
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
        let rc: Vec<f64> = (0..m).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu).collect();
        let Some((dx, ds, dz)) = direction(&rc) else { break };
        let step = max_step(&s, &ds, 0.995).min(max_step(&z, &dz, 0.995));
        for j in 0..n {
            x[j] += step * dx[j];
        }
        for i in 0..m {
            s[i] = (s[i] + step * ds[i]).max(1e-300);
            z[i] = (z[i] + step * dz[i]).max(1e-300);
        }
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }

    let (_, x, z) = best.expect("at least one iterate");
    let kkt = p.kkt_residual(&x, &z);
    if kkt.primal > 1e-6 {
        return Err(QpError::Infeasible { residual: kkt.primal });
    }
    if kkt.max() <= 1e-6 {
        debug!("interior point stopped at iteration cap with acceptable residual {:.3e}", kkt.max());
        return Ok(QpSolution {
            objective: p.objective(&x),
            kkt,
            x,
            z,
            iterations: settings.max_iterations,
        });
    }
    Err(QpError::Stall {
        iterations: settings.max_iterations,
        residual: kkt.max(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_qp() -> QpProblem {
        // min (x0 - 2)^2 + (x1 + 1)^2 over 0 <= x <= 1
        QpProblem {
            n_dense: 2,
            n_aux: 0,
            hessian: DMatrix::from_diagonal_element(2, 2, 2.0),
            linear: vec![-4.0, 2.0],
            rows: vec![vec![(0, 1.0)], vec![(1, 1.0)], vec![(0, -1.0)], vec![(1, -1.0)]],
            rhs: vec![1.0, 1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn box_constrained_quadratic() {
        let sol = solve_qp(&box_qp(), &QpSettings::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!(sol.x[1].abs() < 1e-8);
        assert!(sol.kkt.max() < 1e-8);
    }

    #[test]
    fn epigraph_of_piecewise_linear() {
        // min e + 0.1 x0  s.t. e >= 2 (x0 - 1), e >= -(x0 - 1), 0 <= x0 <= 3
        let p = QpProblem {
            n_dense: 1,
            n_aux: 1,
            hessian: DMatrix::zeros(1, 1),
            linear: vec![0.1, 1.0],
            rows: vec![
                vec![(0, 2.0), (1, -1.0)],
                vec![(0, -1.0), (1, -1.0)],
                vec![(0, 1.0)],
                vec![(0, -1.0)],
            ],
            rhs: vec![2.0, -1.0, 3.0, 0.0],
        };
        let sol = solve_qp(&p, &QpSettings::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!(sol.x[1].abs() < 1e-7);
        assert!((sol.objective - 0.1).abs() < 1e-8);
    }

    #[test]
    fn infeasible_detected() {
        let p = QpProblem {
            n_dense: 1,
            n_aux: 0,
            hessian: DMatrix::zeros(1, 1),
            linear: vec![1.0],
            rows: vec![vec![(0, 1.0)], vec![(0, -1.0)]],
            rhs: vec![-1.0, -1.0],
        };
        assert!(matches!(
            solve_qp(&p, &QpSettings::default()),
            Err(QpError::Infeasible { .. }) | Err(QpError::Stall { .. })
        ));
    }

    #[test]
    fn rows_may_touch_one_aux_only() {
        let p = QpProblem {
            n_dense: 0,
            n_aux: 2,
            hessian: DMatrix::zeros(0, 0),
            linear: vec![1.0, 1.0],
            rows: vec![vec![(0, -1.0), (1, -1.0)]],
            rhs: vec![0.0],
        };
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(QpError::Malformed(_))));
    }
}
