"""Generates the 58-node case-study fixture (crates/core/fixtures/case_study.json).

Seven radial LV feeders behind a 630 kVA MV/LV transformer, 19 service
entries with 319 kW of nominal demand in total. Two long overhead feeders
(F4, F7) are the weak part of the grid.
"""

import json
import math
from pathlib import Path

LAT0, LON0 = 46.2300, 7.3600
M_PER_DEG = 6371000.0 * math.pi / 180.0
LENGTH_FACTOR = 1.05

KINDS = [
    {"name": "NAYY-4x150", "r_per_km": 0.206, "x_per_km": 0.080, "ampacity": 275.0, "section": 150.0, "construction": "buried"},
    {"name": "NAYY-4x95", "r_per_km": 0.320, "x_per_km": 0.082, "ampacity": 215.0, "section": 95.0, "construction": "buried"},
    {"name": "NAYY-4x25", "r_per_km": 1.200, "x_per_km": 0.090, "ampacity": 102.0, "section": 25.0, "construction": "buried"},
    {"name": "AL-35-OH", "r_per_km": 0.868, "x_per_km": 0.300, "ampacity": 135.0, "section": 35.0, "construction": "overhead"},
]
FUSE_RATING = {"NAYY-4x150": 250.0, "NAYY-4x95": 200.0, "NAYY-4x25": 80.0, "AL-35-OH": 125.0}

# name, heading (deg), trunk segment lengths (m), trunk cable, loads as (trunk position, kW)
FEEDERS = [
    ("F1", 0, [120, 100, 100, 90], "NAYY-4x150", [(1, 25), (2, 20), (3, 20), (4, 15)]),
    ("F2", 50, [150, 120, 100, 100], "NAYY-4x95", [(2, 15), (3, 15), (4, 15)]),
    ("F3", 100, [100, 120, 120, 100, 100, 80], "NAYY-4x95", [(3, 16), (5, 16), (6, 16)]),
    ("F4", 150, [80, 70, 65, 60, 50, 40, 30], "AL-35-OH", [(5, 12), (6, 12), (7, 12)]),
    ("F5", 200, [120, 100, 100, 100, 100, 80], "NAYY-4x150", [(4, 20), (6, 20)]),
    ("F6", 250, [80, 80, 60, 60], "NAYY-4x150", [(2, 20), (4, 20)]),
    ("F7", 300, [100, 90, 85, 75, 60, 45], "AL-35-OH", [(5, 15), (6, 15)]),
]
SERVICE_M = 22.0
TAP = -3


def gps(north, east):
    return {
        "lat": round(LAT0 + north / M_PER_DEG, 7),
        "lon": round(LON0 + east / (M_PER_DEG * math.cos(math.radians(LAT0))), 7),
    }


def main():
    nodes = [
        {"id": "MV0", "kind": "substation", "gps": gps(-5, 0), "voltage_level": "MV", "nominal_power": 0.0, "base_voltage": 20.0},
        {"id": "LV0", "kind": "substation", "gps": gps(0, 0), "voltage_level": "LV", "nominal_power": 0.0, "base_voltage": 0.4},
    ]
    pos = {"LV0": (0.0, 0.0)}
    lines, devices = [], [
        {"id": "CB-LV0", "kind": "breaker", "node": "LV0", "state": "closed", "rating": 1000.0},
    ]

    def add_line(lid, a, b, kind):
        (n1, e1), (n2, e2) = pos[a], pos[b]
        dist = math.hypot(n2 - n1, e2 - e1)
        lines.append({"id": lid, "from": a, "to": b, "length": round(LENGTH_FACTOR * dist / 1000.0, 5), "kind": kind})

    for name, heading, segs, cable, loads in FEEDERS:
        h = math.radians(heading)
        along = (math.cos(h), math.sin(h))
        across = (-math.sin(h), math.cos(h))
        prev, dist = "LV0", 0.0
        trunk = []
        for k, seg in enumerate(segs, start=1):
            dist += seg
            wiggle = 8.0 if k % 2 else -8.0
            nid = f"{name}-T{k}"
            pos[nid] = (along[0] * dist + across[0] * wiggle, along[1] * dist + across[1] * wiggle)
            kind = "cabinet" if k == 1 else ("distribution-box" if k % 2 == 0 else "junction")
            nodes.append({"id": nid, "kind": kind, "gps": gps(*pos[nid]), "voltage_level": "LV", "nominal_power": 0.0, "base_voltage": 0.4})
            lid = f"{name}-L{k}"
            add_line(lid, prev, nid, cable)
            if k == 1:
                devices.append({"id": f"{name}-FU", "kind": "fuse", "node": "LV0", "line": lid, "state": "closed", "rating": FUSE_RATING[cable]})
            trunk.append(nid)
            prev = nid
        for j, (at, kw) in enumerate(loads, start=1):
            host = trunk[at - 1]
            nid = f"{name}-H{j}"
            side = 1.0 if j % 2 else -1.0
            hn, he = pos[host]
            pos[nid] = (hn + across[0] * SERVICE_M * side, he + across[1] * SERVICE_M * side)
            nodes.append({"id": nid, "kind": "service-entry", "gps": gps(*pos[nid]), "voltage_level": "LV", "nominal_power": float(kw), "base_voltage": 0.4})
            lid = f"{name}-S{j}"
            add_line(lid, host, nid, "NAYY-4x25")
            devices.append({"id": f"{name}-SF{j}", "kind": "fuse", "node": host, "line": lid, "state": "closed", "rating": 63.0})

    grid = {
        "nodes": nodes,
        "line_kinds": KINDS,
        "lines": lines,
        "transformer": {
            "id": "TR1",
            "rated_s": 630.0,
            "short_circuit_impedance": [0.01, 0.04],
            "tap_position": TAP,
            "tap_step": 0.025,
            "hv_node": "MV0",
            "lv_node": "LV0",
        },
        "devices": devices,
        "slack_node": "MV0",
        "service_area_bbox": {"lat_min": 46.20, "lat_max": 46.26, "lon_min": 7.32, "lon_max": 7.40},
    }
    assert len(nodes) == 58, len(nodes)
    assert sum(n["nominal_power"] for n in nodes) == 319.0
    assert sum(1 for n in nodes if n["nominal_power"] > 0) == 19
    out = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures" / "case_study.json"
    out.write_text(json.dumps(grid, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
