//! Grid data model: nodes, line types, lines, the substation transformer and
//! protective devices, plus the JSON grid-file format.
//!
//! Optional attributes (line length, line-type parameters, device ratings,
//! transformer rating, node coordinates) parse as absent so that the rule
//! checks can report them; everything else is validated at load time.

mod dgs;
mod perunit;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dgs::export_dgs;
pub use perunit::{to_per_unit, BranchKind, PerUnitBranch, PerUnitError, PerUnitGrid, PerUnitNode};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read grid file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid file at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{entity} '{id}' references unknown {target} '{reference}'")]
    Reference {
        entity: &'static str,
        id: String,
        target: &'static str,
        reference: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Substation,
    Cabinet,
    DistributionBox,
    Junction,
    ServiceEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoltageLevel {
    LV,
    MV,
}

/// WGS84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps: Option<GpsPoint>,
    pub voltage_level: VoltageLevel,
    /// Nominal demand in kW; zero for pure junctions.
    #[serde(default)]
    pub nominal_power: f64,
    /// Base (nominal line-to-line) voltage in kV.
    pub base_voltage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    Overhead,
    Buried,
}

/// Line datasheet. `b_per_km` is in µS/km and defaults to zero when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineKind {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ampacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<f64>,
    pub construction: Construction,
}

impl LineKind {
    /// Names of the electrical parameters that are absent.
    pub fn missing_parameters(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.r_per_km.is_none() {
            missing.push("r_per_km");
        }
        if self.x_per_km.is_none() {
            missing.push("x_per_km");
        }
        if self.ampacity.is_none() {
            missing.push("ampacity");
        }
        if self.section.is_none() {
            missing.push("section");
        }
        missing
    }
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Length in km.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    pub kind: String,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub in_service: bool,
}

fn default_transformer_id() -> String {
    "TR1".to_string()
}

fn default_tap_step() -> f64 {
    0.025
}

/// Substation transformer, including the upstream grid's short-circuit
/// impedance folded into `short_circuit_impedance` (per unit on `rated_s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    #[serde(default = "default_transformer_id")]
    pub id: String,
    /// Rated apparent power in kVA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated_s: Option<f64>,
    pub short_circuit_impedance: Complex64,
    #[serde(default)]
    pub tap_position: i32,
    /// Ratio change per tap position, as a fraction.
    #[serde(default = "default_tap_step")]
    pub tap_step: f64,
    pub hv_node: String,
    pub lv_node: String,
}

impl Transformer {
    /// Off-nominal ratio applied on the HV side of the branch.
    pub fn tap_ratio(&self) -> f64 {
        1.0 + self.tap_position as f64 * self.tap_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    Breaker,
    Fuse,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectiveDevice {
    pub id: String,
    pub kind: DeviceKind,
    pub node: String,
    /// Line guarded by the device at `node`, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<String>,
    pub state: SwitchState,
    /// Rated current in A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    /// True when the point lies strictly outside the rectangle; edges count
    /// as inside.
    pub fn strictly_outside(&self, p: GpsPoint) -> bool {
        p.lat < self.lat_min || p.lat > self.lat_max || p.lon < self.lon_min || p.lon > self.lon_max
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.lat_min < self.lat_max && self.lon_min < self.lon_max)
    }
}

/// Electrical network snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nodes: Vec<Node>,
    pub line_kinds: Vec<LineKind>,
    pub lines: Vec<Line>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer: Option<Transformer>,
    #[serde(default)]
    pub devices: Vec<ProtectiveDevice>,
    pub slack_node: String,
    pub service_area_bbox: BoundingBox,
}

impl Grid {
    /// Reads and validates a grid file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let grid: Grid = serde_json::from_str(text).map_err(|e| {
            use serde_json::error::Category;
            match e.classify() {
                Category::Data => GridError::Schema(e.to_string()),
                _ => GridError::Parse {
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                },
            }
        })?;
        grid.check()?;
        Ok(grid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialization cannot fail")
    }

    /// Checks identifier uniqueness, cross references and value invariants.
    /// Connectivity is not checked here; an islanded bus is reported by the
    /// load-flow validation instead.
    pub fn check(&self) -> Result<(), GridError> {
        let mut node_ids = HashSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id.as_str()) {
                return Err(GridError::Schema(format!("duplicate node id '{}'", n.id)));
            }
            if !(n.nominal_power >= 0.0 && n.nominal_power.is_finite()) {
                return Err(GridError::Schema(format!(
                    "node '{}': nominal_power must be >= 0",
                    n.id
                )));
            }
            if !(n.base_voltage > 0.0 && n.base_voltage.is_finite()) {
                return Err(GridError::Schema(format!(
                    "node '{}': base_voltage must be > 0",
                    n.id
                )));
            }
        }

        let mut kind_names = HashSet::new();
        for k in &self.line_kinds {
            if !kind_names.insert(k.name.as_str()) {
                return Err(GridError::Schema(format!("duplicate line kind '{}'", k.name)));
            }
            for (field, value) in [("r_per_km", k.r_per_km), ("ampacity", k.ampacity), ("section", k.section)] {
                if let Some(v) = value {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(GridError::Schema(format!(
                            "line kind '{}': {field} must be > 0",
                            k.name
                        )));
                    }
                }
            }
        }

        let mut line_ids = HashSet::new();
        for l in &self.lines {
            if !line_ids.insert(l.id.as_str()) {
                return Err(GridError::Schema(format!("duplicate line id '{}'", l.id)));
            }
            for endpoint in [&l.from, &l.to] {
                if !node_ids.contains(endpoint.as_str()) {
                    return Err(reference("line", &l.id, "node", endpoint));
                }
            }
            if !kind_names.contains(l.kind.as_str()) {
                return Err(reference("line", &l.id, "line kind", &l.kind));
            }
            if l.from == l.to {
                return Err(GridError::Schema(format!("line '{}' connects a node to itself", l.id)));
            }
            if let Some(len) = l.length {
                if !(len > 0.0 && len.is_finite()) {
                    return Err(GridError::Schema(format!("line '{}': length must be > 0", l.id)));
                }
            }
        }

        if let Some(t) = &self.transformer {
            for endpoint in [&t.hv_node, &t.lv_node] {
                if !node_ids.contains(endpoint.as_str()) {
                    return Err(reference("transformer", &t.id, "node", endpoint));
                }
            }
            if t.hv_node == t.lv_node {
                return Err(GridError::Schema("transformer hv_node equals lv_node".into()));
            }
            if let Some(s) = t.rated_s {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(GridError::Schema("transformer rated_s must be > 0".into()));
                }
            }
            if t.short_circuit_impedance.norm() <= 0.0 {
                return Err(GridError::Schema(
                    "transformer short_circuit_impedance must be non-zero".into(),
                ));
            }
            if t.tap_ratio() <= 0.0 {
                return Err(GridError::Schema("transformer tap ratio must be positive".into()));
            }
        }

        let mut device_ids = HashSet::new();
        for d in &self.devices {
            if !device_ids.insert(d.id.as_str()) {
                return Err(GridError::Schema(format!("duplicate device id '{}'", d.id)));
            }
            if !node_ids.contains(d.node.as_str()) {
                return Err(reference("device", &d.id, "node", &d.node));
            }
            if let Some(line) = &d.line {
                if !line_ids.contains(line.as_str()) {
                    return Err(reference("device", &d.id, "line", line));
                }
            }
            if let Some(r) = d.rating {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(GridError::Schema(format!("device '{}': rating must be > 0", d.id)));
                }
            }
        }

        if !node_ids.contains(self.slack_node.as_str()) {
            return Err(reference("grid", "slack_node", "node", &self.slack_node));
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn line_kind(&self, name: &str) -> Option<&LineKind> {
        self.line_kinds.iter().find(|k| k.name == name)
    }

    pub fn line(&self, id: &str) -> Option<&Line> {
        self.lines.iter().find(|l| l.id == id)
    }

    /// Map from node id to its position in `nodes`.
    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Nodes with a positive nominal demand.
    pub fn load_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.nominal_power > 0.0)
    }

    pub fn total_nominal_power(&self) -> f64 {
        self.nodes.iter().map(|n| n.nominal_power).sum()
    }

    /// Number of in-service lines leaving the transformer's LV node (or the
    /// slack node when there is no transformer).
    pub fn feeder_count(&self) -> usize {
        let head = self
            .transformer
            .as_ref()
            .map(|t| t.lv_node.as_str())
            .unwrap_or(self.slack_node.as_str());
        self.lines
            .iter()
            .filter(|l| l.in_service && (l.from == head || l.to == head))
            .count()
    }
}

fn reference(entity: &'static str, id: &str, target: &'static str, reference: &str) -> GridError {
    GridError::Reference {
        entity,
        id: id.to_string(),
        target,
        reference: reference.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "nodes": [
            {"id": "N1", "kind": "substation", "gps": {"lat": 46.2, "lon": 7.3},
             "voltage_level": "LV", "nominal_power": 0.0, "base_voltage": 0.4},
            {"id": "N2", "kind": "service-entry", "gps": {"lat": 46.2005, "lon": 7.3},
             "voltage_level": "LV", "nominal_power": 10.0, "base_voltage": 0.4}
        ],
        "line_kinds": [
            {"name": "NAYY150", "r_per_km": 0.206, "x_per_km": 0.08, "ampacity": 275,
             "section": 150, "construction": "buried"}
        ],
        "lines": [{"id": "L1", "from": "N1", "to": "N2", "length": 0.06, "kind": "NAYY150"}],
        "slack_node": "N1",
        "service_area_bbox": {"lat_min": 45.8, "lat_max": 47.8, "lon_min": 5.9, "lon_max": 10.5}
    }"#;

    #[test]
    fn minimal_file_parses() {
        let g = Grid::from_json(MINIMAL).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.lines.len(), 1);
        assert!(g.lines[0].in_service);
        assert!(g.transformer.is_none());
    }

    #[test]
    fn dangling_node_reference() {
        let text = MINIMAL.replace(r#""to": "N2""#, r#""to": "X99""#);
        match Grid::from_json(&text) {
            Err(GridError::Reference { reference, .. }) => assert_eq!(reference, "X99"),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_kind_reference() {
        let text = MINIMAL.replace(r#""kind": "NAYY150"}"#, r#""kind": "NOPE"}"#);
        assert!(matches!(Grid::from_json(&text), Err(GridError::Reference { .. })));
    }

    #[test]
    fn syntax_error_is_parse_error() {
        let text = &MINIMAL[..MINIMAL.len() - 3];
        assert!(matches!(Grid::from_json(text), Err(GridError::Parse { .. })));
    }

    #[test]
    fn wrong_field_type_is_schema_error() {
        let text = MINIMAL.replace(r#""length": 0.06"#, r#""length": "long""#);
        assert!(matches!(Grid::from_json(&text), Err(GridError::Schema(_))));
    }

    #[test]
    fn zero_length_rejected() {
        let text = MINIMAL.replace(r#""length": 0.06"#, r#""length": 0.0"#);
        assert!(matches!(Grid::from_json(&text), Err(GridError::Schema(_))));
    }

    #[test]
    fn missing_optional_attributes_survive() {
        let text = MINIMAL
            .replace(r#""length": 0.06, "#, "")
            .replace(r#""ampacity": 275,"#, "");
        let g = Grid::from_json(&text).unwrap();
        assert_eq!(g.lines[0].length, None);
        assert_eq!(g.line_kinds[0].ampacity, None);
        let back = Grid::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn strictly_outside_edges() {
        let b = BoundingBox { lat_min: 45.8, lat_max: 47.8, lon_min: 5.9, lon_max: 10.5 };
        assert!(!b.strictly_outside(GpsPoint { lat: 45.8, lon: 7.0 }));
        assert!(!b.strictly_outside(GpsPoint { lat: 47.0, lon: 10.5 }));
        assert!(b.strictly_outside(GpsPoint { lat: 0.0, lon: 0.0 }));
    }
}
