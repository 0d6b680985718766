//! Independent oracles and grid builders shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use gridgate_core::grid::{
    BoundingBox, Construction, DeviceKind, GpsPoint, Grid, Line, LineKind, Node, NodeKind, ProtectiveDevice,
    SwitchState, Transformer, VoltageLevel,
};
use gridgate_core::hosting::{capex, opex_bill, unfairness};
use gridgate_core::hosting::HostingProblem;
use gridgate_core::powerflow::Network;

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/case_study.json")
}

pub fn fixture() -> Grid {
    Grid::from_path(fixture_path()).expect("fixture parses")
}

pub const TEST_BBOX: BoundingBox = BoundingBox {
    lat_min: 46.0,
    lat_max: 46.1,
    lon_min: 7.0,
    lon_max: 7.1,
};

pub fn node(id: &str, kind: NodeKind, level: VoltageLevel, kw: f64, kv: f64, gps: GpsPoint) -> Node {
    Node {
        id: id.into(),
        kind,
        gps: Some(gps),
        voltage_level: level,
        nominal_power: kw,
        base_voltage: kv,
    }
}

pub fn cable(name: &str, r: f64, x: f64, amps: f64) -> LineKind {
    LineKind {
        name: name.into(),
        r_per_km: Some(r),
        x_per_km: Some(x),
        b_per_km: None,
        ampacity: Some(amps),
        section: Some(95.0),
        construction: Construction::Buried,
    }
}

pub fn line(id: &str, from: &str, to: &str, km: f64, kind: &str) -> Line {
    Line {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length: Some(km),
        kind: kind.into(),
        in_service: true,
    }
}

/// Offset in metres (north, east) from the box centre.
pub fn gps_at(north_m: f64, east_m: f64) -> GpsPoint {
    let lat0: f64 = 46.05;
    GpsPoint {
        lat: lat0 + north_m / 111_195.0,
        lon: 7.05 + east_m / (111_195.0 * lat0.to_radians().cos()),
    }
}

/// LV radial grid with `buses` nodes and no transformer; bus 0 is the slack.
pub fn random_radial_grid(rng: &mut impl Rng, buses: usize) -> Grid {
    let kinds = vec![
        cable("C150", 0.206, 0.08, 275.0),
        cable("C95", 0.32, 0.082, 215.0),
        cable("C50", 0.64, 0.083, 140.0),
    ];
    let mut nodes = vec![node("B0", NodeKind::Substation, VoltageLevel::LV, 0.0, 0.4, gps_at(0.0, 0.0))];
    let mut pos = vec![(0.0, 0.0)];
    let mut lines = Vec::new();
    for i in 1..buses {
        let parent = rng.gen_range(0..i);
        let len_m: f64 = rng.gen_range(20.0..120.0);
        let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = (pos[parent].0 + len_m * heading.cos(), pos[parent].1 + len_m * heading.sin());
        pos.push(p);
        let kw = if rng.gen_bool(0.7) { rng.gen_range(1.0..12.0) } else { 0.0 };
        let kind = if kw > 0.0 { NodeKind::ServiceEntry } else { NodeKind::Junction };
        nodes.push(node(&format!("B{i}"), kind, VoltageLevel::LV, kw, 0.4, gps_at(p.0, p.1)));
        let k = &kinds[rng.gen_range(0..kinds.len())].name;
        lines.push(line(&format!("L{i}"), &format!("B{parent}"), &format!("B{i}"), len_m / 1000.0, k));
    }
    Grid {
        nodes,
        line_kinds: kinds,
        lines,
        transformer: None,
        devices: Vec::new(),
        slack_node: "B0".into(),
        service_area_bbox: TEST_BBOX,
    }
}

/// Transformer-fed toy feeder. `loads` lists `(parent index, length m, kW)`
/// where parent 0 is the LV busbar and parent k the k-th load node.
pub fn toy_feeder(loads: &[(usize, f64, f64)], cable_kind: LineKind, rated_kva: f64, tap: i32) -> Grid {
    let mut nodes = vec![
        node("MV", NodeKind::Substation, VoltageLevel::MV, 0.0, 20.0, gps_at(-5.0, 0.0)),
        node("LV", NodeKind::Substation, VoltageLevel::LV, 0.0, 0.4, gps_at(0.0, 0.0)),
    ];
    let mut lines = Vec::new();
    let mut north = vec![0.0];
    for (k, &(parent, len_m, kw)) in loads.iter().enumerate() {
        let id = format!("H{}", k + 1);
        let from = if parent == 0 { "LV".to_string() } else { format!("H{parent}") };
        let n = north[parent] + len_m;
        north.push(n);
        nodes.push(node(&id, NodeKind::ServiceEntry, VoltageLevel::LV, kw, 0.4, gps_at(n, 10.0 * k as f64)));
        lines.push(line(&format!("L{}", k + 1), &from, &id, len_m / 1000.0, &cable_kind.name));
    }
    Grid {
        nodes,
        line_kinds: vec![cable_kind],
        lines,
        transformer: Some(Transformer {
            id: "TR".into(),
            rated_s: Some(rated_kva),
            short_circuit_impedance: Complex64::new(0.01, 0.04),
            tap_position: tap,
            tap_step: 0.025,
            hv_node: "MV".into(),
            lv_node: "LV".into(),
        }),
        devices: vec![ProtectiveDevice {
            id: "CB".into(),
            kind: DeviceKind::Breaker,
            node: "LV".into(),
            line: None,
            state: SwitchState::Closed,
            rating: Some(400.0),
        }],
        slack_node: "MV".into(),
        service_area_bbox: TEST_BBOX,
    }
}

/// Gauss-Seidel on the dense bus admittance matrix. `load` is the complex
/// demand per bus in pu. Returns the voltages and the number of sweeps.
pub fn gauss_seidel(net: &Network, load: &[Complex64], tol: f64, max_sweeps: usize) -> (Vec<Complex64>, usize) {
    let y = net.ybus.to_dense();
    let n = load.len();
    let slack = net.slack();
    let mut v = vec![net.slack_voltage; n];
    for sweep in 1..=max_sweeps {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            if i == slack {
                continue;
            }
            let mut acc = -(load[i].conj()) / v[i].conj();
            for j in 0..n {
                if j != i {
                    acc -= y[(i, j)] * v[j];
                }
            }
            let next = acc / y[(i, i)];
            delta = delta.max((next - v[i]).norm());
            v[i] = next;
        }
        if delta < tol {
            return (v, sweep);
        }
    }
    (v, max_sweeps)
}

/// Total cost plus weighted unfairness, computed from the economic
/// definitions alone.
pub fn exact_objective(problem: &HostingProblem, alpha_kw: &[f64]) -> f64 {
    let e = &problem.economics;
    capex(alpha_kw, e.c_cap)
        + opex_bill(alpha_kw, &problem.load_kw, &problem.pv, problem.dt_hours, e)
        + problem.lambda * unfairness(alpha_kw, &problem.pbar_kw).expect("at least two candidates")
}

pub struct LatticeResult {
    pub alpha_kw: Vec<f64>,
    pub objective: f64,
    pub points: usize,
}

/// Exhaustive search over the lattice `step·ℤ` inside the box and the
/// linear grid constraints of `problem`.
pub fn lattice_search(problem: &HostingProblem, step: f64) -> LatticeResult {
    let m = problem.candidates.len();
    assert!((2..=3).contains(&m), "lattice search handles 2 or 3 candidates");
    let e = &problem.economics;
    let axes: Vec<Vec<f64>> = problem
        .alpha_cap_kw
        .iter()
        .map(|&cap| (0..=(cap / step + 1e-9).floor() as usize).map(|k| k as f64 * step).collect())
        .collect();
    // the bill is separable per candidate
    let bills: Vec<Vec<f64>> = (0..m)
        .map(|c| {
            axes[c]
                .iter()
                .map(|&a| opex_bill(&[a], &problem.load_kw[c..=c], &problem.pv, problem.dt_hours, e))
                .collect()
        })
        .collect();
    let third = if m == 3 { axes[2].len() } else { 1 };
    let outer: Vec<(usize, usize)> = (0..axes[0].len()).flat_map(|i| (0..axes[1].len()).map(move |j| (i, j))).collect();
    let best = outer
        .par_iter()
        .flat_map_iter(|&(i, j)| (0..third).map(move |k| (i, j, k)))
        .filter_map(|(i, j, k)| {
            let idx = [i, j, k];
            let alpha: Vec<f64> = (0..m).map(|c| axes[c][idx[c]]).collect();
            if problem.constraints.iter().any(|r| r.value(&alpha) > r.rhs) {
                return None;
            }
            let bill: f64 = (0..m).map(|c| bills[c][idx[c]]).sum();
            let obj = capex(&alpha, e.c_cap)
                + bill
                + problem.lambda * unfairness(&alpha, &problem.pbar_kw).expect("at least two candidates");
            Some((obj, alpha))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("the origin is feasible");
    LatticeResult {
        alpha_kw: best.1,
        objective: best.0,
        points: axes.iter().map(Vec::len).product(),
    }
}

/// Kinds of single-error corruption used by the recall checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    ExtraLoop,
    GpsOutOfArea,
    LengthInflated,
    SectionOutOfRange,
    MissingAttribute,
    ParallelFuse,
    TrunkImpedance,
}

impl Corruption {
    pub const ALL: [Corruption; 7] = [
        Corruption::ExtraLoop,
        Corruption::GpsOutOfArea,
        Corruption::LengthInflated,
        Corruption::SectionOutOfRange,
        Corruption::MissingAttribute,
        Corruption::ParallelFuse,
        Corruption::TrunkImpedance,
    ];
}

/// A corrupted grid with the rule ids and entity ids that count as a hit.
pub struct Injected {
    pub grid: Grid,
    pub rules: Vec<&'static str>,
    pub entities: Vec<String>,
    pub site: String,
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

/// Nodes on the far side of `line_id` in a radial grid.
pub fn downstream_nodes(grid: &Grid, line_id: &str) -> Vec<String> {
    let cut = grid.line(line_id).expect("line exists");
    let mut seen = vec![cut.from.clone(), cut.to.clone()];
    let mut stack = vec![cut.to.clone()];
    let mut out = vec![cut.to.clone()];
    while let Some(n) = stack.pop() {
        for l in grid.lines.iter().filter(|l| l.id != line_id) {
            let other = if l.from == n {
                &l.to
            } else if l.to == n {
                &l.from
            } else {
                continue;
            };
            if !seen.contains(other) {
                seen.push(other.clone());
                stack.push(other.clone());
                out.push(other.clone());
            }
        }
    }
    out
}

/// Trunk lines of the fixture (`F<k>-L<j>`), excluding service drops.
pub fn trunk_lines(grid: &Grid) -> Vec<String> {
    grid.lines
        .iter()
        .filter(|l| l.id.starts_with('F') && l.id.contains("-L"))
        .map(|l| l.id.clone())
        .collect()
}

/// Applies one randomly placed corruption of the given kind.
pub fn inject(grid: &Grid, kind: Corruption, rng: &mut impl Rng) -> Injected {
    use gridgate_core::lfcheck::{LF_NONCONVERGENCE, LINE_OVERCURRENT, V_OUT_OF_BAND};
    use gridgate_core::rules::*;

    let mut g = grid.clone();
    let one = |rule, entity: String| (vec![rule], vec![entity.clone()], entity);
    let (rules, entities, site) = match kind {
        Corruption::ExtraLoop => {
            let lv: Vec<&Node> = grid.nodes.iter().filter(|n| n.voltage_level == VoltageLevel::LV).collect();
            let (a, b) = loop {
                let a = pick(rng, &lv);
                let b = pick(rng, &lv);
                let adjacent = grid
                    .lines
                    .iter()
                    .any(|l| (l.from == a.id && l.to == b.id) || (l.from == b.id && l.to == a.id));
                if a.id != b.id && !adjacent {
                    break (a.id.clone(), b.id.clone());
                }
            };
            let kind = pick(rng, &grid.line_kinds).name.clone();
            // routed along the street grid so that only the loop is wrong
            let mut extra = line("X-LOOP", &a, &b, 1.0, &kind);
            extra.length = Some(manhattan_distance_m(&g, &extra).expect("fixture nodes carry GPS") / 1000.0);
            g.lines.push(extra);
            one(MESHED_TOPOLOGY, "X-LOOP".to_string())
        }
        Corruption::GpsOutOfArea => {
            let i = rng.gen_range(0..g.nodes.len());
            let bb = g.service_area_bbox;
            let off = rng.gen_range(0.001..0.5);
            let p = g.nodes[i].gps.expect("fixture nodes carry GPS");
            g.nodes[i].gps = Some(match rng.gen_range(0..4) {
                0 => GpsPoint { lat: bb.lat_max + off, ..p },
                1 => GpsPoint { lat: bb.lat_min - off, ..p },
                2 => GpsPoint { lon: bb.lon_max + off, ..p },
                _ => GpsPoint { lon: bb.lon_min - off, ..p },
            });
            one(GPS_OUT_OF_AREA, g.nodes[i].id.clone())
        }
        Corruption::LengthInflated => {
            let i = rng.gen_range(0..g.lines.len());
            let len = g.lines[i].length.expect("fixture lines carry a length");
            g.lines[i].length = Some(len * rng.gen_range(3.0..10.0));
            one(LENGTH_VS_MANHATTAN, g.lines[i].id.clone())
        }
        Corruption::SectionOutOfRange => {
            let i = rng.gen_range(0..g.lines.len());
            let mut kind = grid.line_kind(&g.lines[i].kind).expect("kind exists").clone();
            kind.name = "X-SECTION".into();
            kind.section = Some(if rng.gen_bool(0.5) { rng.gen_range(0.5..9.9) } else { rng.gen_range(401.0..2000.0) });
            g.lines[i].kind = kind.name.clone();
            g.line_kinds.push(kind);
            one(SECTION_OUT_OF_RANGE, g.lines[i].id.clone())
        }
        Corruption::MissingAttribute => match rng.gen_range(0..5) {
            0 => {
                let i = rng.gen_range(0..g.lines.len());
                g.lines[i].length = None;
                one(MISSING_LENGTH, g.lines[i].id.clone())
            }
            1 => {
                let i = rng.gen_range(0..g.nodes.len());
                g.nodes[i].gps = None;
                one(MISSING_GPS, g.nodes[i].id.clone())
            }
            2 => {
                let i = rng.gen_range(0..g.devices.len());
                g.devices[i].rating = None;
                one(MISSING_RATING, g.devices[i].id.clone())
            }
            3 => {
                let t = g.transformer.as_mut().expect("fixture has a transformer");
                t.rated_s = None;
                one(MISSING_RATED_S, t.id.clone())
            }
            _ => {
                let i = rng.gen_range(0..g.line_kinds.len());
                match rng.gen_range(0..4) {
                    0 => g.line_kinds[i].r_per_km = None,
                    1 => g.line_kinds[i].x_per_km = None,
                    2 => g.line_kinds[i].ampacity = None,
                    _ => g.line_kinds[i].section = None,
                }
                one(MISSING_LINE_PARAMETER, g.line_kinds[i].name.clone())
            }
        },
        Corruption::ParallelFuse => {
            let l = pick(rng, &grid.lines).clone();
            let node = if rng.gen_bool(0.5) { l.from.clone() } else { l.to.clone() };
            let existing = grid
                .devices
                .iter()
                .any(|d| d.kind == DeviceKind::Fuse && d.node == node && d.line.as_deref() == Some(l.id.as_str()));
            let copies = if existing { 1 } else { 2 };
            for k in 0..copies {
                g.devices.push(ProtectiveDevice {
                    id: format!("X-FUSE-{k}"),
                    kind: DeviceKind::Fuse,
                    node: node.clone(),
                    line: Some(l.id.clone()),
                    state: SwitchState::Closed,
                    rating: Some(pick(rng, &[40.0, 63.0, 100.0, 160.0]).to_owned()),
                });
            }
            one(PARALLEL_FUSES, node)
        }
        Corruption::TrunkImpedance => {
            let trunk = trunk_lines(grid);
            let id = pick(rng, &trunk).clone();
            let i = g.lines.iter().position(|l| l.id == id).expect("trunk line exists");
            let mut kind = grid.line_kind(&g.lines[i].kind).expect("kind exists").clone();
            kind.name = "X-IMPEDANCE".into();
            kind.r_per_km = kind.r_per_km.map(|r| r * 100.0);
            kind.x_per_km = kind.x_per_km.map(|x| x * 100.0);
            g.lines[i].kind = kind.name.clone();
            g.line_kinds.push(kind);
            let mut entities = downstream_nodes(grid, &id);
            entities.push(id.clone());
            (vec![V_OUT_OF_BAND, LINE_OVERCURRENT, LF_NONCONVERGENCE], entities, id)
        }
    };
    Injected {
        grid: g,
        rules,
        entities,
        site,
    }
}
