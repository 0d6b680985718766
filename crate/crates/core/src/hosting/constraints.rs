//! Linear grid constraints over the candidate PV capacities.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;

use crate::grid::BranchKind;
use crate::lfcheck::LimitSet;
use crate::powerflow::Network;
use crate::sensitivity::LinearizedStep;

/// Sides of the polygon replacing a circular limit.
pub const POLYGON_SIDES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    VoltageUpper,
    VoltageLower,
    /// Polygon cut `k` of a line-current circle.
    Current(usize),
    /// Polygon cut `k` of the transformer apparent-power circle.
    Transformer(usize),
}

/// `coeffs · α ≤ rhs`, with `α` in kWp per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub kind: ConstraintKind,
    pub entity: String,
    pub step: usize,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl fmt::Display for LinearConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ConstraintKind::VoltageUpper => "v-max".to_string(),
            ConstraintKind::VoltageLower => "v-min".to_string(),
            ConstraintKind::Current(k) => format!("ampacity[{k}]"),
            ConstraintKind::Transformer(k) => format!("transformer[{k}]"),
        };
        write!(f, "{kind} {} @ step {}", self.entity, self.step)
    }
}

impl LinearConstraint {
    pub fn value(&self, alpha_kw: &[f64]) -> f64 {
        self.coeffs.iter().zip(alpha_kw).map(|(c, a)| c * a).sum()
    }

    /// Largest left-hand side over the box `0 ≤ α ≤ cap`.
    pub fn max_over_box(&self, cap_kw: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(cap_kw)
            .map(|(&c, &u)| if c > 0.0 { c * u } else { 0.0 })
            .sum()
    }
}

/// Unit normals `(cos θ_k, sin θ_k)`, `θ_k = 2πk/K`.
pub fn polygon_directions(sides: usize) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / sides as f64;
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Radius of the cuts so that the polygon is inscribed in a circle of
/// radius `limit`.
pub fn inscribed_radius(limit: f64, sides: usize) -> f64 {
    limit * (PI / sides as f64).cos()
}

/// Polygon cuts for an affine complex quantity `w0 + Σ g_c (α_c − ref_c)`
/// that must stay inside a circle of radius `limit`.
fn polygon_rows(
    w0: Complex64,
    grad: &[Complex64],
    alpha_ref: &[f64],
    limit: f64,
    sides: usize,
    mut make: impl FnMut(usize, Vec<f64>, f64),
) {
    let radius = inscribed_radius(limit, sides);
    for (k, (c, s)) in polygon_directions(sides).into_iter().enumerate() {
        let coeffs: Vec<f64> = grad.iter().map(|g| c * g.re + s * g.im).collect();
        let offset: f64 = coeffs.iter().zip(alpha_ref).map(|(a, r)| a * r).sum();
        let rhs = radius - (c * w0.re + s * w0.im) + offset;
        make(k, coeffs, rhs);
    }
}

/// Voltage band, line ampacity and transformer rating constraints for
/// every linearized step. `candidates` are bus indices of the decision
/// variables.
pub fn build_grid_constraints(
    net: &Network,
    steps: &[LinearizedStep],
    candidates: &[usize],
    limits: &LimitSet,
    sides: usize,
) -> Vec<LinearConstraint> {
    let grid = &net.grid;
    let slack = grid.slack;
    let mut rows = Vec::new();
    for lin in steps {
        let alpha_ref: Vec<f64> = candidates.iter().map(|&n| lin.alpha_ref_kw[n]).collect();
        for (i, node) in grid.nodes.iter().enumerate() {
            if i == slack {
                continue;
            }
            let band = limits.band(node.voltage_level);
            let coeffs: Vec<f64> = candidates.iter().map(|&n| lin.vmag_per_kwp(i, n)).collect();
            let offset: f64 = coeffs.iter().zip(&alpha_ref).map(|(a, r)| a * r).sum();
            let v0 = lin.base_vmag[i];
            rows.push(LinearConstraint {
                kind: ConstraintKind::VoltageUpper,
                entity: node.id.clone(),
                step: lin.step,
                rhs: 1.0 + band - v0 + offset,
                coeffs: coeffs.clone(),
            });
            rows.push(LinearConstraint {
                kind: ConstraintKind::VoltageLower,
                entity: node.id.clone(),
                step: lin.step,
                rhs: v0 - (1.0 - band) - offset,
                coeffs: coeffs.iter().map(|c| -c).collect(),
            });
        }
        for (b, br) in grid.branches.iter().enumerate() {
            if br.kind != BranchKind::Line {
                continue;
            }
            let Some(limit) = br.ampacity else { continue };
            let grad: Vec<Complex64> = candidates.iter().map(|&n| lin.current_per_kwp(b, n)).collect();
            polygon_rows(lin.base_currents[b], &grad, &alpha_ref, limit, sides, |k, coeffs, rhs| {
                rows.push(LinearConstraint {
                    kind: ConstraintKind::Current(k),
                    entity: br.id.clone(),
                    step: lin.step,
                    coeffs,
                    rhs,
                })
            });
        }
        if let Some((id, limit)) = transformer_limit(net, limits) {
            let grad: Vec<Complex64> = candidates.iter().map(|&n| lin.slack_per_kwp(n)).collect();
            polygon_rows(lin.base_slack, &grad, &alpha_ref, limit, sides, |k, coeffs, rhs| {
                rows.push(LinearConstraint {
                    kind: ConstraintKind::Transformer(k),
                    entity: id.clone(),
                    step: lin.step,
                    coeffs,
                    rhs,
                })
            });
        }
    }
    rows
}

/// Apparent-power rating of the substation transformer in pu.
pub fn transformer_limit(net: &Network, limits: &LimitSet) -> Option<(String, f64)> {
    let br = net.grid.branches.iter().find(|b| b.kind == BranchKind::Transformer)?;
    let pu = match limits.gcp_ampacity {
        Some(amps) => amps / br.i_base_amps,
        None => br.ampacity?,
    };
    Some((br.id.clone(), pu))
}

/// Drops rows that no point of the box `0 ≤ α ≤ cap` can violate.
pub fn prune(rows: Vec<LinearConstraint>, cap_kw: &[f64]) -> Vec<LinearConstraint> {
    rows.into_iter().filter(|r| r.max_over_box(cap_kw) > r.rhs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_touches_circle_at_vertices() {
        let dirs = polygon_directions(POLYGON_SIDES);
        let r = inscribed_radius(1.0, POLYGON_SIDES);
        // vertex between cut 0 and cut 1 lies on the unit circle
        let half = PI / POLYGON_SIDES as f64;
        let (x, y) = (half.cos(), half.sin());
        let max = dirs.iter().map(|(c, s)| c * x + s * y).fold(f64::MIN, f64::max);
        assert!((max - r).abs() < 1e-12);
        // the point (S, 0) of the unshrunk polygon meets cut 0 with equality
        let vals: Vec<f64> = dirs.iter().map(|(c, _)| c * 1.0).collect();
        assert!(vals.iter().all(|&v| v <= 1.0 + 1e-15));
        assert_eq!(vals.iter().filter(|&&v| (v - 1.0).abs() < 1e-15).count(), 1);
    }

    #[test]
    fn unshrunk_polygon_bound() {
        // every point inside the cuts of radius S has modulus at most S / cos(π/K)
        let k = POLYGON_SIDES;
        let dirs = polygon_directions(k);
        let bound = 1.0 / (PI / k as f64).cos();
        for step in 0..3600 {
            let phi = 2.0 * PI * step as f64 / 3600.0;
            let (x, y) = (phi.cos(), phi.sin());
            let reach = dirs
                .iter()
                .map(|(c, s)| c * x + s * y)
                .filter(|&d| d > 0.0)
                .map(|d| 1.0 / d)
                .fold(f64::INFINITY, f64::min);
            assert!(reach <= bound + 1e-12);
        }
        assert!((bound - 1.0196).abs() < 1e-4);
    }

    #[test]
    fn prune_keeps_reachable_rows() {
        let row = |coeffs: Vec<f64>, rhs| LinearConstraint {
            kind: ConstraintKind::VoltageUpper,
            entity: "n".into(),
            step: 0,
            coeffs,
            rhs,
        };
        let kept = prune(vec![row(vec![1.0, 1.0], 3.0), row(vec![1.0, -5.0], 1.5), row(vec![1.0, 1.0], 5.0)], &[2.0, 2.0]);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].rhs, 3.0);
        assert_eq!(kept[1].rhs, 1.5);
    }
}
