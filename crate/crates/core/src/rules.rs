//! Rule-based sanity checks over a parsed grid.
//!
//! Topology and missing-attribute findings are errors (they prevent a
//! meaningful load flow); GPS, length and section findings are warnings.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::finding::{sort_findings, EntityKind, EntityRef, Finding, Severity};
use crate::grid::{BoundingBox, DeviceKind, Grid, Line, SwitchState, VoltageLevel};

pub const MESHED_TOPOLOGY: &str = "meshed-topology";
pub const GPS_OUT_OF_AREA: &str = "gps-out-of-area";
pub const LENGTH_VS_MANHATTAN: &str = "length-vs-manhattan";
pub const SECTION_OUT_OF_RANGE: &str = "section-out-of-range";
pub const MISSING_LENGTH: &str = "missing-length";
pub const MISSING_LINE_PARAMETER: &str = "missing-line-parameter";
pub const MISSING_RATING: &str = "missing-rating";
pub const MISSING_RATED_S: &str = "missing-rated-s";
pub const MISSING_GPS: &str = "missing-gps";
pub const PARALLEL_FUSES: &str = "parallel-fuses";

/// Every rule id the basic checks can emit.
pub const BASIC_RULES: &[&str] = &[
    MESHED_TOPOLOGY,
    GPS_OUT_OF_AREA,
    LENGTH_VS_MANHATTAN,
    SECTION_OUT_OF_RANGE,
    MISSING_LENGTH,
    MISSING_LINE_PARAMETER,
    MISSING_RATING,
    MISSING_RATED_S,
    MISSING_GPS,
    PARALLEL_FUSES,
];

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("line '{line}': endpoint '{node}' has no GPS coordinates")]
    MissingCoordinates { line: String, node: String },
    #[error("invalid rule configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleConfig {
    /// A cable is suspicious when longer than `length_ratio` times the
    /// Manhattan distance between its endpoints.
    pub length_ratio: f64,
    /// Lower bound applied to the Manhattan distance, in metres.
    pub length_floor_m: f64,
    pub section_min: f64,
    pub section_max: f64,
    pub bbox: BoundingBox,
}

impl RuleConfig {
    pub fn new(bbox: BoundingBox) -> Self {
        Self {
            length_ratio: 1.5,
            length_floor_m: 25.0,
            section_min: 10.0,
            section_max: 400.0,
            bbox,
        }
    }

    /// Defaults with the grid's own service area.
    pub fn for_grid(grid: &Grid) -> Self {
        Self::new(grid.service_area_bbox)
    }

    pub fn check(&self) -> Result<(), RuleError> {
        if !(self.length_ratio > 1.0) {
            return Err(RuleError::InvalidConfig("length ratio must exceed 1".into()));
        }
        if !(self.section_min < self.section_max) {
            return Err(RuleError::InvalidConfig("section_min must be below section_max".into()));
        }
        if self.bbox.is_degenerate() {
            return Err(RuleError::InvalidConfig("service-area box is degenerate".into()));
        }
        Ok(())
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when both were already in the same set.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

fn sorted_lines(grid: &Grid) -> Vec<&Line> {
    let mut lines: Vec<&Line> = grid.lines.iter().collect();
    lines.sort_by(|a, b| a.id.cmp(&b.id));
    lines
}

/// One finding per independent cycle among in-service LV lines. Lines are
/// scanned in id order; the line that closes each cycle is reported.
pub fn check_radiality(grid: &Grid) -> Vec<Finding> {
    let index = grid.node_index();
    let mut sets = DisjointSet::new(grid.nodes.len());
    let mut findings = Vec::new();
    for line in sorted_lines(grid) {
        if !line.in_service {
            continue;
        }
        let (a, b) = (index[line.from.as_str()], index[line.to.as_str()]);
        if grid.nodes[a].voltage_level != VoltageLevel::LV || grid.nodes[b].voltage_level != VoltageLevel::LV {
            continue;
        }
        if !sets.union(a, b) {
            findings.push(Finding::new(
                MESHED_TOPOLOGY,
                Severity::Error,
                EntityRef::new(EntityKind::Line, &line.id),
                format!("line '{}' closes a loop in the LV network", line.id),
            ));
        }
    }
    findings
}

pub fn check_gps_bounds(grid: &Grid, cfg: &RuleConfig) -> Vec<Finding> {
    grid.nodes
        .iter()
        .filter_map(|n| {
            let p = n.gps?;
            cfg.bbox.strictly_outside(p).then(|| {
                Finding::new(
                    GPS_OUT_OF_AREA,
                    Severity::Warning,
                    EntityRef::new(EntityKind::Node, &n.id),
                    format!("node '{}' at ({}, {}) lies outside the service area", n.id, p.lat, p.lon),
                )
            })
        })
        .collect()
}

/// Manhattan distance in metres between the endpoints of a line, on an
/// equirectangular projection around their mean latitude.
pub fn manhattan_distance_m(grid: &Grid, line: &Line) -> Result<f64, RuleError> {
    let coords = |id: &str| {
        grid.node(id).and_then(|n| n.gps).ok_or_else(|| RuleError::MissingCoordinates {
            line: line.id.clone(),
            node: id.to_string(),
        })
    };
    let a = coords(&line.from)?;
    let b = coords(&line.to)?;
    let mean_lat = ((a.lat + b.lat) / 2.0).to_radians();
    let north = EARTH_RADIUS_M * (b.lat - a.lat).to_radians();
    let east = EARTH_RADIUS_M * (b.lon - a.lon).to_radians() * mean_lat.cos();
    Ok(north.abs() + east.abs())
}

/// Evaluates the length rule for one line: `Ok(None)` when it passes or
/// the line has no recorded length.
pub fn length_vs_manhattan(grid: &Grid, line: &Line, cfg: &RuleConfig) -> Result<Option<Finding>, RuleError> {
    let Some(length_km) = line.length else {
        return Ok(None);
    };
    let d = manhattan_distance_m(grid, line)?;
    let length_m = length_km * 1000.0;
    let threshold = cfg.length_ratio * d.max(cfg.length_floor_m);
    Ok((length_m > threshold).then(|| {
        Finding::new(
            LENGTH_VS_MANHATTAN,
            Severity::Warning,
            EntityRef::new(EntityKind::Line, &line.id),
            format!(
                "line '{}' is {:.1} m long but its endpoints are {:.1} m apart (Manhattan)",
                line.id, length_m, d
            ),
        )
        .with_values(length_m, threshold)
    }))
}

/// Lines whose endpoints lack coordinates are skipped here; the missing
/// coordinates are reported by [`check_missing_attributes`].
pub fn check_length_vs_manhattan(grid: &Grid, cfg: &RuleConfig) -> Vec<Finding> {
    grid.lines
        .iter()
        .filter_map(|l| length_vs_manhattan(grid, l, cfg).ok().flatten())
        .collect()
}

pub fn check_sections(grid: &Grid, cfg: &RuleConfig) -> Vec<Finding> {
    grid.lines
        .iter()
        .filter_map(|l| {
            let section = grid.line_kind(&l.kind)?.section?;
            let outside = section < cfg.section_min || section > cfg.section_max;
            outside.then(|| {
                let bound = if section < cfg.section_min { cfg.section_min } else { cfg.section_max };
                Finding::new(
                    SECTION_OUT_OF_RANGE,
                    Severity::Warning,
                    EntityRef::new(EntityKind::Line, &l.id),
                    format!(
                        "line '{}' has a {} mm² section, outside [{}, {}]",
                        l.id, section, cfg.section_min, cfg.section_max
                    ),
                )
                .with_values(section, bound)
            })
        })
        .collect()
}

pub fn check_missing_attributes(grid: &Grid) -> Vec<Finding> {
    let mut findings = Vec::new();
    let missing = |rule: &str, kind, id: &str, what: &str| {
        Finding::new(
            rule,
            Severity::Error,
            EntityRef::new(kind, id),
            format!("{id}: missing {what}"),
        )
    };
    for n in &grid.nodes {
        if n.gps.is_none() {
            findings.push(missing(MISSING_GPS, EntityKind::Node, &n.id, "GPS coordinates"));
        }
    }
    for k in &grid.line_kinds {
        for attr in k.missing_parameters() {
            findings.push(missing(MISSING_LINE_PARAMETER, EntityKind::LineKind, &k.name, attr));
        }
    }
    for l in &grid.lines {
        if l.length.is_none() {
            findings.push(missing(MISSING_LENGTH, EntityKind::Line, &l.id, "length"));
        }
    }
    for d in &grid.devices {
        if d.rating.is_none() {
            findings.push(missing(MISSING_RATING, EntityKind::Device, &d.id, "rating"));
        }
    }
    if let Some(t) = &grid.transformer {
        if t.rated_s.is_none() {
            findings.push(missing(MISSING_RATED_S, EntityKind::Transformer, &t.id, "rated power"));
        }
    }
    findings
}

/// Flags nodes where two or more closed fuses guard the same line. Fuses
/// without a declared line cannot be paired and are ignored.
pub fn check_parallel_fuses(grid: &Grid) -> Vec<Finding> {
    let mut groups: BTreeMap<(&str, &str), Vec<&str>> = BTreeMap::new();
    for d in &grid.devices {
        if d.kind != DeviceKind::Fuse || d.state != SwitchState::Closed {
            continue;
        }
        if let Some(line) = &d.line {
            groups.entry((d.node.as_str(), line.as_str())).or_default().push(d.id.as_str());
        }
    }
    let mut per_node: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for ((node, line), fuses) in groups {
        if fuses.len() >= 2 {
            per_node
                .entry(node)
                .or_default()
                .push(format!("{} on line '{}'", fuses.join(", "), line));
        }
    }
    per_node
        .into_iter()
        .map(|(node, desc)| {
            Finding::new(
                PARALLEL_FUSES,
                Severity::Error,
                EntityRef::new(EntityKind::Node, node),
                format!("parallel closed fuses at node '{node}': {}", desc.join("; ")),
            )
        })
        .collect()
}

/// All basic rules, sorted by rule id and entity id.
pub fn run_basic_validation(grid: &Grid, cfg: &RuleConfig) -> Vec<Finding> {
    let mut findings = Vec::new();
    findings.extend(check_radiality(grid));
    findings.extend(check_gps_bounds(grid, cfg));
    findings.extend(check_length_vs_manhattan(grid, cfg));
    findings.extend(check_sections(grid, cfg));
    findings.extend(check_missing_attributes(grid));
    findings.extend(check_parallel_fuses(grid));
    sort_findings(&mut findings);
    findings
}

/// Per-entity finding counts, handy for reports.
pub fn count_by_rule(findings: &[Finding]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for f in findings {
        *counts.entry(f.rule_id.as_str()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::*;
    use num_complex::Complex64;

    const LAT0: f64 = 46.23;
    const LON0: f64 = 7.36;

    /// Point `north` and `east` metres away from the reference origin.
    fn at(north: f64, east: f64) -> GpsPoint {
        let lat = LAT0 + (north / EARTH_RADIUS_M).to_degrees();
        let mean = ((LAT0 + lat) / 2.0).to_radians();
        GpsPoint { lat, lon: LON0 + (east / (EARTH_RADIUS_M * mean.cos())).to_degrees() }
    }

    fn node(id: &str, p: GpsPoint) -> Node {
        Node {
            id: id.into(),
            kind: NodeKind::Junction,
            gps: Some(p),
            voltage_level: VoltageLevel::LV,
            nominal_power: 0.0,
            base_voltage: 0.4,
        }
    }

    fn line(id: &str, from: &str, to: &str, km: f64) -> Line {
        Line {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            length: Some(km),
            kind: "K150".into(),
            in_service: true,
        }
    }

    fn kind(name: &str, section: f64) -> LineKind {
        LineKind {
            name: name.into(),
            r_per_km: Some(0.206),
            x_per_km: Some(0.08),
            b_per_km: None,
            ampacity: Some(275.0),
            section: Some(section),
            construction: Construction::Buried,
        }
    }

    fn grid(nodes: Vec<Node>, lines: Vec<Line>) -> Grid {
        Grid {
            nodes,
            line_kinds: vec![kind("K150", 150.0)],
            lines,
            transformer: None,
            devices: vec![],
            slack_node: "A".into(),
            service_area_bbox: BoundingBox { lat_min: 45.8, lat_max: 47.8, lon_min: 5.9, lon_max: 10.5 },
        }
    }

    fn triangle() -> Grid {
        grid(
            vec![node("A", at(0.0, 0.0)), node("B", at(50.0, 0.0)), node("C", at(0.0, 50.0))],
            vec![line("L1", "A", "B", 0.05), line("L2", "B", "C", 0.1), line("L3", "C", "A", 0.05)],
        )
    }

    #[test]
    fn triangle_has_one_cycle() {
        let f = check_radiality(&triangle());
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].rule_id, MESHED_TOPOLOGY);
        assert_eq!(f[0].entity.kind, EntityKind::Line);
    }

    #[test]
    fn open_line_breaks_the_mesh() {
        let mut g = triangle();
        g.lines[1].in_service = false;
        assert!(check_radiality(&g).is_empty());
    }

    #[test]
    fn mv_lines_are_ignored_for_meshing() {
        let mut g = triangle();
        g.nodes[2].voltage_level = VoltageLevel::MV;
        assert!(check_radiality(&g).is_empty());
    }

    #[test]
    fn gps_outside_service_area() {
        let mut g = triangle();
        let cfg = RuleConfig::for_grid(&g);
        assert!(check_gps_bounds(&g, &cfg).is_empty());
        g.nodes[1].gps = Some(GpsPoint { lat: 0.0, lon: 0.0 });
        let f = check_gps_bounds(&g, &cfg);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].entity.id, "B");
        g.nodes[1].gps = Some(GpsPoint { lat: 47.8, lon: 5.9 });
        assert!(check_gps_bounds(&g, &cfg).is_empty());
    }

    #[test]
    fn manhattan_length_rule() {
        // 60 m north + 40 m east = 100 m Manhattan
        let mut g = grid(vec![node("A", at(0.0, 0.0)), node("B", at(60.0, 40.0))], vec![line("L1", "A", "B", 1.0)]);
        let cfg = RuleConfig::for_grid(&g);
        let d = manhattan_distance_m(&g, &g.lines[0]).unwrap();
        assert!((d - 100.0).abs() < 1e-6, "{d}");
        let f = check_length_vs_manhattan(&g, &cfg);
        assert_eq!(f.len(), 1);
        assert!((f[0].measured.unwrap() - 1000.0).abs() < 1e-9);
        assert!((f[0].threshold.unwrap() - 150.0).abs() < 1e-6);
        g.lines[0].length = Some(0.12);
        assert!(check_length_vs_manhattan(&g, &cfg).is_empty());
    }

    #[test]
    fn colocated_nodes_use_floor() {
        let g = grid(vec![node("A", at(0.0, 0.0)), node("B", at(0.0, 0.0))], vec![line("L1", "A", "B", 0.030)]);
        assert!(check_length_vs_manhattan(&g, &RuleConfig::for_grid(&g)).is_empty());
        let g = grid(vec![node("A", at(0.0, 0.0)), node("B", at(0.0, 0.0))], vec![line("L1", "A", "B", 0.038)]);
        assert_eq!(check_length_vs_manhattan(&g, &RuleConfig::for_grid(&g)).len(), 1);
    }

    #[test]
    fn missing_coordinates_error() {
        let mut g = triangle();
        g.nodes[0].gps = None;
        let err = length_vs_manhattan(&g, &g.lines[0].clone(), &RuleConfig::for_grid(&g)).unwrap_err();
        assert!(matches!(err, RuleError::MissingCoordinates { .. }));
    }

    #[test]
    fn section_bounds() {
        let mut g = triangle();
        let cfg = RuleConfig::for_grid(&g);
        assert!(check_sections(&g, &cfg).is_empty());
        g.line_kinds[0].section = Some(2.5);
        assert_eq!(check_sections(&g, &cfg).len(), 3);
        g.line_kinds[0].section = Some(1000.0);
        let f = check_sections(&g, &cfg);
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].threshold, Some(400.0));
    }

    #[test]
    fn missing_length_and_rating() {
        let mut g = triangle();
        assert!(check_missing_attributes(&g).is_empty());
        g.lines[0].length = None;
        let f = check_missing_attributes(&g);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].rule_id, MISSING_LENGTH);
        assert_eq!(f[0].entity, EntityRef::new(EntityKind::Line, "L1"));
        g.lines[0].length = Some(0.05);
        g.devices.push(ProtectiveDevice {
            id: "F1".into(),
            kind: DeviceKind::Fuse,
            node: "A".into(),
            line: Some("L1".into()),
            state: SwitchState::Closed,
            rating: None,
        });
        let f = check_missing_attributes(&g);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].rule_id, MISSING_RATING);
    }

    #[test]
    fn missing_transformer_rating() {
        let mut g = triangle();
        g.transformer = Some(Transformer {
            id: "T".into(),
            rated_s: None,
            short_circuit_impedance: Complex64::new(0.01, 0.04),
            tap_position: 0,
            tap_step: 0.025,
            hv_node: "B".into(),
            lv_node: "A".into(),
        });
        let f = check_missing_attributes(&g);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].entity.kind, EntityKind::Transformer);
    }

    fn fuse(id: &str, node: &str, line: &str, state: SwitchState) -> ProtectiveDevice {
        ProtectiveDevice {
            id: id.into(),
            kind: DeviceKind::Fuse,
            node: node.into(),
            line: Some(line.into()),
            state,
            rating: Some(160.0),
        }
    }

    #[test]
    fn parallel_fuses() {
        let mut g = triangle();
        g.devices = vec![fuse("F1", "A", "L1", SwitchState::Closed), fuse("F2", "A", "L3", SwitchState::Closed)];
        assert!(check_parallel_fuses(&g).is_empty());
        g.devices.push(fuse("F3", "A", "L1", SwitchState::Closed));
        let f = check_parallel_fuses(&g);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].entity, EntityRef::new(EntityKind::Node, "A"));
        g.devices[2].state = SwitchState::Open;
        assert!(check_parallel_fuses(&g).is_empty());
    }

    #[test]
    fn aggregate_is_sorted_and_deterministic() {
        let mut g = triangle();
        g.lines[2].length = None;
        g.line_kinds[0].section = Some(2.5);
        let cfg = RuleConfig::for_grid(&g);
        let a = run_basic_validation(&g, &cfg);
        let b = run_basic_validation(&g, &cfg);
        assert_eq!(a, b);
        let keys: Vec<_> = a.iter().map(|f| (f.rule_id.clone(), f.entity.id.clone())).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(count_by_rule(&a)[SECTION_OUT_OF_RANGE], 3);
    }

    #[test]
    fn config_invariants() {
        let mut cfg = RuleConfig::for_grid(&triangle());
        assert!(cfg.check().is_ok());
        cfg.length_ratio = 1.0;
        assert!(cfg.check().is_err());
    }
}
