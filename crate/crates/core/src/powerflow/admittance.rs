use nalgebra::DMatrix;
use num_complex::Complex64;

use super::PowerFlowError;
use crate::grid::PerUnitGrid;

/// Branches with a smaller impedance modulus are rejected.
pub const MIN_IMPEDANCE: f64 = 1e-9;

/// Branch-to-node incidence: row `b` has +1 at the from-bus and -1 at the
/// to-bus of in-service branch `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    pub node_count: usize,
    pub branches: Vec<(usize, usize)>,
}

impl IncidenceMatrix {
    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.branches.len(), self.node_count);
        for (b, &(f, t)) in self.branches.iter().enumerate() {
            a[(b, f)] = 1.0;
            a[(b, t)] = -1.0;
        }
        a
    }
}

pub fn incidence_matrix(grid: &PerUnitGrid) -> IncidenceMatrix {
    IncidenceMatrix {
        node_count: grid.node_count(),
        branches: grid.branches.iter().map(|b| (b.from, b.to)).collect(),
    }
}

/// Diagonal series admittances plus the half-shunt seen at each terminal
/// (pi model). `tap` carries the off-nominal ratio on the from-side.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveAdmittance {
    pub series: Vec<Complex64>,
    pub half_shunt: Vec<f64>,
    pub tap: Vec<f64>,
}

pub fn primitive_admittance(grid: &PerUnitGrid) -> Result<PrimitiveAdmittance, PowerFlowError> {
    let mut series = Vec::with_capacity(grid.branches.len());
    for b in &grid.branches {
        if !(b.z.norm() >= MIN_IMPEDANCE) {
            return Err(PowerFlowError::ZeroImpedance { branch: b.id.clone() });
        }
        series.push(b.series_admittance());
    }
    Ok(PrimitiveAdmittance {
        series,
        half_shunt: grid.branches.iter().map(|b| b.b_shunt / 2.0).collect(),
        tap: grid.branches.iter().map(|b| b.tap).collect(),
    })
}

/// Sparse complex bus admittance matrix, one sorted row per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    rows: Vec<Vec<(usize, Complex64)>>,
}

impl AdmittanceMatrix {
    pub fn order(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        match self.rows[i].binary_search_by_key(&j, |&(c, _)| c) {
            Ok(k) => self.rows[i][k].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Nodal current injections `Y·V`.
    pub fn mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, y)| y * v[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.order();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                m[(i, j)] = y;
            }
        }
        m
    }

    fn add(&mut self, i: usize, j: usize, value: Complex64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(k) => row[k].1 += value,
            Err(k) => row.insert(k, (j, value)),
        }
    }
}

/// Assembles `Y = Aᵀ·diag(y)·A` plus the shunt terms on the diagonal. A
/// tapped branch uses `1/tap` in place of the +1 incidence entry.
pub fn bus_admittance(a: &IncidenceMatrix, prim: &PrimitiveAdmittance) -> AdmittanceMatrix {
    let mut y = AdmittanceMatrix {
        rows: vec![Vec::new(); a.node_count],
    };
    for i in 0..a.node_count {
        y.add(i, i, Complex64::new(0.0, 0.0));
    }
    for (b, &(f, t)) in a.branches.iter().enumerate() {
        let ys = prim.series[b];
        let tap = prim.tap[b];
        let sh = Complex64::new(0.0, prim.half_shunt[b]);
        y.add(f, f, ys / (tap * tap) + sh);
        y.add(t, t, ys + sh);
        y.add(f, t, -ys / tap);
        y.add(t, f, -ys / tap);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BranchKind, PerUnitBranch, PerUnitNode, VoltageLevel};

    fn pu_grid(branches: &[(usize, usize, Complex64, f64)], n: usize) -> PerUnitGrid {
        PerUnitGrid {
            s_base_kva: 100.0,
            nodes: (0..n)
                .map(|i| PerUnitNode {
                    id: format!("N{i}"),
                    base_kv: 0.4,
                    voltage_level: VoltageLevel::LV,
                    nominal_power: 0.0,
                })
                .collect(),
            slack: 0,
            branches: branches
                .iter()
                .enumerate()
                .map(|(k, &(from, to, z, b))| PerUnitBranch {
                    id: format!("B{k}"),
                    kind: BranchKind::Line,
                    from,
                    to,
                    z,
                    b_shunt: b,
                    tap: 1.0,
                    ampacity: None,
                    ampacity_amps: None,
                    z_base_ohm: 1.6,
                    i_base_amps: 144.3,
                })
                .collect(),
        }
    }

    #[test]
    fn single_branch_incidence() {
        let g = pu_grid(&[(0, 1, Complex64::new(0.1, 0.1), 0.0)], 2);
        let a = incidence_matrix(&g).to_dense();
        assert_eq!(a, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    }

    #[test]
    fn radial_incidence_rank() {
        let branches: Vec<_> = (1..6).map(|i| ((i - 1) / 2, i, Complex64::new(0.1, 0.05), 0.0)).collect();
        let a = incidence_matrix(&pu_grid(&branches, 6)).to_dense();
        assert_eq!(a.nrows(), 5);
        assert_eq!(a.rank(1e-10), 5);
    }

    #[test]
    fn complex_reciprocal() {
        let g = pu_grid(&[(0, 1, Complex64::new(0.1, 0.1), 0.0)], 2);
        let p = primitive_admittance(&g).unwrap();
        assert!((p.series[0] - Complex64::new(5.0, -5.0)).norm() < 1e-12);
        assert_eq!(p.half_shunt, vec![0.0]);
    }

    #[test]
    fn zero_impedance_rejected() {
        let g = pu_grid(&[(0, 1, Complex64::new(0.0, 0.0), 0.0)], 2);
        assert_eq!(
            primitive_admittance(&g),
            Err(PowerFlowError::ZeroImpedance { branch: "B0".into() })
        );
    }

    #[test]
    fn two_bus_matrix_with_and_without_shunt() {
        let z = Complex64::new(0.05, 0.02);
        let y = 1.0 / z;
        let g = pu_grid(&[(0, 1, z, 0.0)], 2);
        let ybus = bus_admittance(&incidence_matrix(&g), &primitive_admittance(&g).unwrap());
        assert!((ybus.get(0, 0) - y).norm() < 1e-12);
        assert!((ybus.get(0, 1) + y).norm() < 1e-12);
        assert!((ybus.get(1, 0) + y).norm() < 1e-12);
        assert!((ybus.get(1, 1) - y).norm() < 1e-12);

        let g = pu_grid(&[(0, 1, z, 0.002)], 2);
        let ybus = bus_admittance(&incidence_matrix(&g), &primitive_admittance(&g).unwrap());
        assert!((ybus.get(0, 0) - (y + Complex64::new(0.0, 0.001))).norm() < 1e-12);
        assert!((ybus.get(1, 1) - (y + Complex64::new(0.0, 0.001))).norm() < 1e-12);
    }

    #[test]
    fn matches_dense_triple_product() {
        let branches = [
            (0, 1, Complex64::new(0.02, 0.01), 0.001),
            (1, 2, Complex64::new(0.05, 0.02), 0.0),
            (1, 3, Complex64::new(0.03, 0.03), 0.002),
        ];
        let g = pu_grid(&branches, 4);
        let a = incidence_matrix(&g);
        let p = primitive_admittance(&g).unwrap();
        let y = bus_admittance(&a, &p).to_dense();

        let ad = a.to_dense().map(|x| Complex64::new(x, 0.0));
        let yprim = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p.series.clone()));
        let mut expected = ad.transpose() * yprim * &ad;
        for (b, &(f, t, _, sh)) in branches.iter().enumerate() {
            let _ = b;
            expected[(f, f)] += Complex64::new(0.0, sh / 2.0);
            expected[(t, t)] += Complex64::new(0.0, sh / 2.0);
        }
        assert!((y.clone() - expected).norm() < 1e-12);
        // symmetry and row sums equal to the bus shunt
        assert!((y.clone() - y.transpose()).norm() < 1e-14);
        let row0: Complex64 = y.row(0).iter().sum();
        assert!((row0 - Complex64::new(0.0, 0.0005)).norm() < 1e-12);
    }
}
