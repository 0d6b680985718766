use num_complex::Complex64;
use thiserror::Error;

use super::{Grid, VoltageLevel};

#[derive(Debug, Error, PartialEq)]
pub enum PerUnitError {
    #[error("base power must be positive, got {0} kVA")]
    InvalidBase(f64),
    #[error("{entity} '{id}' lacks attribute '{attribute}' required for per-unit conversion")]
    MissingAttribute {
        entity: &'static str,
        id: String,
        attribute: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Line,
    Transformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerUnitNode {
    pub id: String,
    pub base_kv: f64,
    pub voltage_level: VoltageLevel,
    /// Nominal demand in per unit of the system base.
    pub nominal_power: f64,
}

/// One in-service branch in per unit on the system base. Branch quantities
/// are expressed on the base voltage of the `to` terminal, which for a line
/// is also the base of the `from` terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct PerUnitBranch {
    pub id: String,
    pub kind: BranchKind,
    pub from: usize,
    pub to: usize,
    pub z: Complex64,
    /// Total shunt susceptance, split half per terminal.
    pub b_shunt: f64,
    /// Off-nominal ratio on the `from` side (1.0 for lines).
    pub tap: f64,
    /// Thermal limit in per-unit current, if known.
    pub ampacity: Option<f64>,
    /// Thermal limit in amperes, if known.
    pub ampacity_amps: Option<f64>,
    /// Impedance base in ohms, used to undo the conversion.
    pub z_base_ohm: f64,
    /// Current base in amperes.
    pub i_base_amps: f64,
}

impl PerUnitBranch {
    pub fn series_admittance(&self) -> Complex64 {
        1.0 / self.z
    }

    /// Series impedance back in ohms.
    pub fn z_ohm(&self) -> Complex64 {
        self.z * self.z_base_ohm
    }

    /// Shunt susceptance back in siemens.
    pub fn b_siemens(&self) -> f64 {
        self.b_shunt / self.z_base_ohm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerUnitGrid {
    pub s_base_kva: f64,
    pub nodes: Vec<PerUnitNode>,
    pub slack: usize,
    pub branches: Vec<PerUnitBranch>,
}

impl PerUnitGrid {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn branch_position(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_base_kva
    }
}

/// Impedance base in ohms for a line-to-line voltage in kV and a power in kVA.
pub fn impedance_base(v_base_kv: f64, s_base_kva: f64) -> f64 {
    v_base_kv * v_base_kv * 1000.0 / s_base_kva
}

/// Three-phase current base in amperes.
pub fn current_base(v_base_kv: f64, s_base_kva: f64) -> f64 {
    s_base_kva / (3f64.sqrt() * v_base_kv)
}

/// Converts the in-service part of the grid to per unit on `s_base_kva`.
pub fn to_per_unit(grid: &Grid, s_base_kva: f64) -> Result<PerUnitGrid, PerUnitError> {
    if !(s_base_kva > 0.0 && s_base_kva.is_finite()) {
        return Err(PerUnitError::InvalidBase(s_base_kva));
    }
    let index = grid.node_index();
    let nodes: Vec<PerUnitNode> = grid
        .nodes
        .iter()
        .map(|n| PerUnitNode {
            id: n.id.clone(),
            base_kv: n.base_voltage,
            voltage_level: n.voltage_level,
            nominal_power: n.nominal_power / s_base_kva,
        })
        .collect();

    let mut branches = Vec::new();
    if let Some(t) = &grid.transformer {
        let rated = t.rated_s.ok_or_else(|| PerUnitError::MissingAttribute {
            entity: "transformer",
            id: t.id.clone(),
            attribute: "rated_s",
        })?;
        let to = index[t.lv_node.as_str()];
        let v_lv = grid.nodes[to].base_voltage;
        let i_base = current_base(v_lv, s_base_kva);
        let gcp_amps = rated / (3f64.sqrt() * v_lv);
        branches.push(PerUnitBranch {
            id: t.id.clone(),
            kind: BranchKind::Transformer,
            from: index[t.hv_node.as_str()],
            to,
            z: t.short_circuit_impedance * (s_base_kva / rated),
            b_shunt: 0.0,
            tap: t.tap_ratio(),
            ampacity: Some(gcp_amps / i_base),
            ampacity_amps: Some(gcp_amps),
            z_base_ohm: impedance_base(v_lv, s_base_kva),
            i_base_amps: i_base,
        });
    }

    for line in grid.lines.iter().filter(|l| l.in_service) {
        let missing = |attribute| PerUnitError::MissingAttribute {
            entity: "line",
            id: line.id.clone(),
            attribute,
        };
        let kind = grid.line_kind(&line.kind).expect("line kind resolved at parse time");
        let length = line.length.ok_or_else(|| missing("length"))?;
        let r = kind.r_per_km.ok_or_else(|| missing("r_per_km"))?;
        let x = kind.x_per_km.ok_or_else(|| missing("x_per_km"))?;
        let b = kind.b_per_km.unwrap_or(0.0);
        let from = index[line.from.as_str()];
        let to = index[line.to.as_str()];
        let v_base = grid.nodes[from].base_voltage;
        let z_base = impedance_base(v_base, s_base_kva);
        let i_base = current_base(v_base, s_base_kva);
        branches.push(PerUnitBranch {
            id: line.id.clone(),
            kind: BranchKind::Line,
            from,
            to,
            z: Complex64::new(r, x) * length / z_base,
            b_shunt: b * 1e-6 * length * z_base,
            tap: 1.0,
            ampacity: kind.ampacity.map(|a| a / i_base),
            ampacity_amps: kind.ampacity,
            z_base_ohm: z_base,
            i_base_amps: i_base,
        });
    }

    Ok(PerUnitGrid {
        s_base_kva,
        nodes,
        slack: index[grid.slack_node.as_str()],
        branches,
    })
}
