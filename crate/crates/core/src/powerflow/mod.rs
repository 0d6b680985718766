//! Single-phase-equivalent load flow: incidence and primitive admittance
//! matrices, bus admittance assembly, Newton solve and the multi-period
//! runner.

mod admittance;
mod multi;
mod newton;

use num_complex::Complex64;
use thiserror::Error;

pub use admittance::{
    bus_admittance, incidence_matrix, primitive_admittance, AdmittanceMatrix, IncidenceMatrix, PrimitiveAdmittance,
    MIN_IMPEDANCE,
};
pub use multi::{
    multi_period_loadflow, write_current_csv, write_voltage_csv, InjectionProfile, LoadFlowResult, StepResult,
};
pub use newton::{find_islanded_bus, power_mismatch, solve_loadflow, SolverOptions, StepSolution};
pub(crate) use newton::{jacobian, unknown_positions};

use crate::grid::PerUnitGrid;

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("branch '{branch}' has a zero series impedance")]
    ZeroImpedance { branch: String },
    #[error("singular Jacobian: bus index {bus} is not connected to the slack")]
    SingularJacobian { bus: usize },
    #[error("expected {expected} entries, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("injection data contains non-finite values")]
    NonFiniteInjection,
    #[error("time step must be positive, got {0} h")]
    InvalidTimeStep(f64),
}

/// A per-unit grid together with its assembled admittance data.
#[derive(Debug, Clone)]
pub struct Network {
    pub grid: PerUnitGrid,
    pub primitive: PrimitiveAdmittance,
    pub ybus: AdmittanceMatrix,
    pub slack_voltage: Complex64,
}

impl Network {
    pub fn new(grid: PerUnitGrid) -> Result<Self, PowerFlowError> {
        let primitive = primitive_admittance(&grid)?;
        let ybus = bus_admittance(&incidence_matrix(&grid), &primitive);
        Ok(Self {
            grid,
            primitive,
            ybus,
            slack_voltage: Complex64::new(1.0, 0.0),
        })
    }

    pub fn with_slack_voltage(mut self, v: Complex64) -> Self {
        self.slack_voltage = v;
        self
    }

    pub fn slack(&self) -> usize {
        self.grid.slack
    }

    pub fn solve(&self, load: &[Complex64], opts: &SolverOptions) -> Result<StepSolution, PowerFlowError> {
        solve_loadflow(&self.ybus, self.grid.slack, self.slack_voltage, load, opts)
    }

    /// Currents entering each branch at its from-terminal.
    pub fn branch_currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.grid
            .branches
            .iter()
            .enumerate()
            .map(|(b, br)| self.branch_current_from(b, v[br.from], v[br.to]))
            .collect()
    }

    pub(crate) fn branch_current_from(&self, b: usize, vf: Complex64, vt: Complex64) -> Complex64 {
        let y = self.primitive.series[b];
        let a = self.primitive.tap[b];
        let sh = Complex64::new(0.0, self.primitive.half_shunt[b]);
        (y / (a * a) + sh) * vf - y / a * vt
    }

    pub(crate) fn branch_current_to(&self, b: usize, vf: Complex64, vt: Complex64) -> Complex64 {
        let y = self.primitive.series[b];
        let a = self.primitive.tap[b];
        let sh = Complex64::new(0.0, self.primitive.half_shunt[b]);
        -y / a * vf + (y + sh) * vt
    }

    /// Series plus shunt losses of every branch.
    pub fn branch_losses(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.grid
            .branches
            .iter()
            .enumerate()
            .map(|(b, br)| {
                let (vf, vt) = (v[br.from], v[br.to]);
                vf * self.branch_current_from(b, vf, vt).conj() + vt * self.branch_current_to(b, vf, vt).conj()
            })
            .collect()
    }

    /// Complex power delivered by the slack bus into the network.
    pub fn slack_power(&self, v: &[Complex64]) -> Complex64 {
        let s = self.grid.slack;
        let i: Complex64 = self.ybus.row(s).iter().map(|&(j, y)| y * v[j]).sum();
        v[s] * i.conj()
    }
}
