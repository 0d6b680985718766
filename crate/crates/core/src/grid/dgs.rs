//! DGS-flavoured interchange export.
//!
//! Three sections (`## TYPE`, `## ELEMENT`, `## GRAPHIC`), one record per
//! line, `key=value` pairs separated by semicolons. Records are ordered by
//! identifier so equal grids export to identical bytes. Absent optional
//! attributes are omitted from their record.

use std::fmt::Write;

use super::{DeviceKind, Grid, SwitchState};

struct Record {
    sort_key: (String, &'static str),
    text: String,
}

fn record(class: &'static str, id: &str, fields: &[(&str, String)]) -> Record {
    let mut text = format!("class={class};id={id}");
    for (k, v) in fields {
        let _ = write!(text, ";{k}={v}");
    }
    Record {
        sort_key: (id.to_string(), class),
        text,
    }
}

fn opt(fields: &mut Vec<(&str, String)>, key: &'static str, value: Option<f64>) {
    if let Some(v) = value {
        fields.push((key, v.to_string()));
    }
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn export_dgs(grid: &Grid) -> String {
    let mut types = Vec::new();
    for k in &grid.line_kinds {
        let mut f = Vec::new();
        opt(&mut f, "rline", k.r_per_km);
        opt(&mut f, "xline", k.x_per_km);
        opt(&mut f, "bline", k.b_per_km);
        opt(&mut f, "inom_a", k.ampacity);
        opt(&mut f, "section_mm2", k.section);
        f.push(("construction", format!("{:?}", k.construction).to_lowercase()));
        types.push(record("TypLne", &k.name, &f));
    }
    if let Some(t) = &grid.transformer {
        let mut f = Vec::new();
        opt(&mut f, "strn_kva", t.rated_s);
        f.push(("uk_re_pu", t.short_circuit_impedance.re.to_string()));
        f.push(("uk_im_pu", t.short_circuit_impedance.im.to_string()));
        f.push(("dutap", t.tap_step.to_string()));
        types.push(record("TypTr2", &t.id, &f));
    }

    let mut elements = Vec::new();
    for n in &grid.nodes {
        let f = vec![
            ("kind", serde_json::to_value(n.kind).unwrap().as_str().unwrap().to_string()),
            ("level", format!("{:?}", n.voltage_level)),
            ("uknom_kv", n.base_voltage.to_string()),
            ("pnom_kw", n.nominal_power.to_string()),
            ("outserv", flag(false)),
        ];
        elements.push(record("ElmTerm", &n.id, &f));
    }
    for l in &grid.lines {
        let mut f = vec![("typ_id", l.kind.clone())];
        opt(&mut f, "dline_km", l.length);
        f.push(("outserv", flag(!l.in_service)));
        f.push(("cterm1", l.from.clone()));
        f.push(("cterm2", l.to.clone()));
        elements.push(record("ElmLne", &l.id, &f));
    }
    if let Some(t) = &grid.transformer {
        let f = vec![
            ("typ_id", t.id.clone()),
            ("nntap", t.tap_position.to_string()),
            ("outserv", flag(false)),
            ("cterm_hv", t.hv_node.clone()),
            ("cterm_lv", t.lv_node.clone()),
        ];
        elements.push(record("ElmTr2", &t.id, &f));
    }
    for d in &grid.devices {
        let class = match d.kind {
            DeviceKind::Fuse => "RelFuse",
            DeviceKind::Breaker | DeviceKind::Switch => "StaSwitch",
        };
        let mut f = vec![
            ("kind", format!("{:?}", d.kind).to_lowercase()),
            ("on_off", flag(d.state == SwitchState::Closed)),
        ];
        opt(&mut f, "rating_a", d.rating);
        f.push(("cterm", d.node.clone()));
        if let Some(line) = &d.line {
            f.push(("cline", line.clone()));
        }
        elements.push(record(class, &d.id, &f));
    }

    let mut graphics = Vec::new();
    for n in &grid.nodes {
        if let Some(p) = n.gps {
            graphics.push(record(
                "IntGrfnet",
                &n.id,
                &[("lat", p.lat.to_string()), ("lon", p.lon.to_string())],
            ));
        }
    }

    let mut out = String::new();
    for (header, mut records) in [("TYPE", types), ("ELEMENT", elements), ("GRAPHIC", graphics)] {
        records.sort_by(|a, b| a.sort_key.cmp(&b.sort_key));
        let _ = writeln!(out, "## {header}");
        for r in records {
            out.push_str(&r.text);
            out.push('\n');
        }
    }
    out
}
