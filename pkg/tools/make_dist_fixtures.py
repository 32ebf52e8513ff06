#!/usr/bin/env python3
"""Generate the three-phase distribution fixtures and the IEEE13 reference.

* ieee13.json      — the IEEE 13-bus test feeder (public Kersting data as
                     modeled by the OPEN platform: wye-g transformer at
                     633-634 folded to the 4.16 kV base, 671-692 modeled as a
                     low-impedance switch, shunt capacitors at 675/611, all
                     loads constant-power). Converted to per-unit on
                     V_base = 4160/sqrt(3) V per phase, S_base = 1 MVA per
                     phase.
* ieee13_reference.csv — voltage profile for the base loads computed by the
                     ported OPEN reference solver (tools/openref.py), an
                     independent established Z-Bus implementation.
* ieee123.json     — synthetic 123-bus MV feeder stand-in at the IEEE123
                     scale: radial, mixed phasing laterals, 85 load points,
                     wye and delta constant-power loads.
* eulv.json        — synthetic LV feeder stand-in at the EULV scale: 908
                     buses x 3 phases = 2724 node-phases, 55 single-phase
                     house loads.

Regenerate with:  python tools/make_dist_fixtures.py [output_dir]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

_HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(_HERE.parent / "src"))
sys.path.insert(0, str(_HERE))

from openref import (  # noqa: E402
    RefBus,
    RefCapacitor,
    RefLine,
    RefNetwork3ph,
    RefTransformer,
)

from acpflow.distribution import (  # noqa: E402
    build_zbus_model,
    parse_distribution_json,
    zbus_iterate,
)

FT_PER_MILE = 5280.0

# IEEE13 overhead/underground line configurations: series impedance in
# ohm/mile, shunt susceptance in microsiemens/mile (upper triangle, abc order;
# zero diagonal = phase absent).
LINE_CONFIGS = {
    "601": (
        {"aa": 0.3465 + 1.0179j, "bb": 0.3375 + 1.0478j, "cc": 0.3414 + 1.0348j,
         "ab": 0.1560 + 0.5017j, "ac": 0.1580 + 0.4236j, "bc": 0.1535 + 0.3849j},
        {"aa": 6.2998, "bb": 5.9597, "cc": 5.6386, "ab": -1.9958, "ac": -1.2595, "bc": -0.7417},
    ),
    "602": (
        {"aa": 0.7526 + 1.1814j, "bb": 0.7475 + 1.1983j, "cc": 0.7436 + 1.2112j,
         "ab": 0.1580 + 0.4236j, "ac": 0.1560 + 0.5017j, "bc": 0.1535 + 0.3849j},
        {"aa": 5.6990, "bb": 5.1795, "cc": 5.4246, "ab": -1.0817, "ac": -1.6905, "bc": -0.6588},
    ),
    "603": (
        {"aa": 0, "bb": 1.3294 + 1.3471j, "cc": 1.3238 + 1.3569j,
         "ab": 0, "ac": 0, "bc": 0.2066 + 0.4591j},
        {"aa": 0, "bb": 4.7097, "cc": 4.6658, "ab": 0, "ac": 0, "bc": -0.8999},
    ),
    "604": (
        {"aa": 1.3238 + 1.3569j, "bb": 0, "cc": 1.3294 + 1.3471j,
         "ab": 0, "ac": 0.2066 + 0.4591j, "bc": 0},
        {"aa": 4.6658, "bb": 0, "cc": 4.7097, "ab": 0, "ac": -0.8999, "bc": 0},
    ),
    "605": (
        {"aa": 0, "bb": 0, "cc": 1.3292 + 1.3475j, "ab": 0, "ac": 0, "bc": 0},
        {"aa": 0, "bb": 0, "cc": 4.5193, "ab": 0, "ac": 0, "bc": 0},
    ),
    "606": (
        {"aa": 0.7982 + 0.4463j, "bb": 0.7891 + 0.4041j, "cc": 0.7982 + 0.4463j,
         "ab": 0.3192 + 0.0328j, "ac": 0.2849 - 0.0143j, "bc": 0.3192 + 0.0328j},
        {"aa": 96.8897, "bb": 96.8897, "cc": 96.8897, "ab": 0, "ac": 0, "bc": 0},
    ),
    "607": (
        {"aa": 1.3425 + 0.5124j, "bb": 0, "cc": 0, "ab": 0, "ac": 0, "bc": 0},
        {"aa": 88.9912, "bb": 0, "cc": 0, "ab": 0, "ac": 0, "bc": 0},
    ),
}

# from, to, config, length (feet)
IEEE13_LINES = [
    ("632", "645", "603", 500.0),
    ("632", "633", "602", 500.0),
    ("645", "646", "603", 300.0),
    ("650", "632", "601", 2000.0),
    ("684", "652", "607", 800.0),
    ("632", "671", "601", 2000.0),
    ("671", "684", "604", 300.0),
    ("671", "680", "601", 1000.0),
    ("684", "611", "605", 300.0),
    ("692", "675", "606", 500.0),
]
SWITCH_Z_OHM = 1e-4  # closed switch 671-692
XFMR_Z_OHM = 0.381 + 0.692j  # 633-634 wye-g/wye-g, folded to the 4.16 kV side

IEEE13_PHASING = {
    "650": "abc", "632": "abc", "645": "bc", "646": "bc", "633": "abc",
    "634": "abc", "671": "abc", "680": "abc", "684": "ac", "611": "c",
    "652": "a", "692": "abc", "675": "abc",
}
IEEE13_ORDER = ["650", "632", "645", "646", "633", "634", "671", "680",
                "684", "611", "652", "692", "675"]

# constant-power spot loads (kW, kvar); the 632 entry lumps the 632-671
# distributed load at its sending end
IEEE13_WYE_LOADS = {
    "632": {"a": (17, 10), "b": (66, 38), "c": (117, 68)},
    "634": {"a": (160, 110), "b": (120, 90), "c": (120, 90)},
    "645": {"b": (170, 125)},
    "652": {"a": (128, 86)},
    "675": {"a": (485, 190), "b": (68, 60), "c": (290, 212)},
    "611": {"c": (170, 80)},
}
IEEE13_DELTA_LOADS = {
    "646": {"bc": (230, 132)},
    "671": {"ab": (385, 220), "bc": (385, 220), "ca": (385, 220)},
    "692": {"ca": (170, 151)},
}
IEEE13_CAPS = [("675", 2.4, "Y", (200, 200, 200)), ("611", 2.4, "Y", (0, 0, 100))]

V_BASE_PH = 4160.0 / np.sqrt(3)  # volts, line-to-neutral
S_BASE_1PH = 1e6  # VA per phase
Z_BASE = V_BASE_PH**2 / S_BASE_1PH


def _cfg_matrices(cfg: str) -> tuple[np.ndarray, np.ndarray]:
    zd, bd = LINE_CONFIGS[cfg]
    key = lambda i, j: "abc"[min(i, j)] + "abc"[max(i, j)]  # noqa: E731
    z = np.array([[zd[key(i, j)] for j in range(3)] for i in range(3)], dtype=complex)
    b = np.array([[1j * bd[key(i, j)] for j in range(3)] for i in range(3)], dtype=complex)
    return z, b


def _enc_c(z: complex) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


def _enc_m(m: np.ndarray) -> list:
    return [[_enc_c(m[i, j]) for j in range(m.shape[1])] for i in range(m.shape[0])]


def _line_entry(fbus, tbus, phases, y_series, y_shunt=None):
    k = len(phases)
    ysh = y_shunt if y_shunt is not None else np.zeros((k, k), dtype=complex)
    return {
        "from": fbus,
        "to": tbus,
        "phases": phases,
        "y_ff": _enc_m(y_series + 0.5 * ysh),
        "y_ft": _enc_m(-y_series),
        "y_tf": _enc_m(-y_series),
        "y_tt": _enc_m(y_series + 0.5 * ysh),
    }


def _slack_voltage_pu(phases: str, vset: float = 1.0) -> dict:
    a = np.exp(1j * 2 * np.pi / 3)
    ref = {"a": 1.0 + 0j, "b": a**2, "c": a}
    return {p: _enc_c(vset * ref[p]) for p in phases}


# ---------------------------------------------------------------------------
# IEEE13
# ---------------------------------------------------------------------------


def build_ieee13_json() -> dict:
    lines = []
    for fbus, tbus, cfg, length in IEEE13_LINES:
        z3, b3 = _cfg_matrices(cfg)
        scale = length / FT_PER_MILE
        phases = "".join(p for k, p in enumerate("abc") if z3[k, k] != 0)
        idx = [k for k, p in enumerate("abc") if p in phases]
        z_ohm = z3[np.ix_(idx, idx)] * scale
        b_s = b3[np.ix_(idx, idx)] * 1e-6 * scale
        y_series = np.linalg.inv(z_ohm) * Z_BASE
        y_shunt = b_s * Z_BASE
        lines.append(_line_entry(fbus, tbus, phases, y_series, y_shunt))

    # closed switch 671-692
    ysw = np.eye(3, dtype=complex) / SWITCH_Z_OHM * Z_BASE
    lines.append(_line_entry("671", "692", "abc", ysw))
    # transformer 633-634 (wye-g/wye-g): diagonal blocks, no shunt
    yt = np.eye(3, dtype=complex) / XFMR_Z_OHM * Z_BASE
    lines.append(_line_entry("633", "634", "abc", yt))

    shunts = []
    for bus, kvln, connect, qs in IEEE13_CAPS:
        assert connect == "Y"
        kvph = kvln * 1e3
        phases = "".join(p for k, p in enumerate("abc") if qs[k] != 0)
        y = np.diag([1j * qs[k] * 1e3 / kvph**2 for k, p in enumerate("abc") if qs[k] != 0])
        shunts.append({"bus": bus, "phases": phases, "y": _enc_m(y * Z_BASE)})

    loads = []
    for bus, entries in IEEE13_WYE_LOADS.items():
        for ph, (p_kw, q_kvar) in entries.items():
            loads.append(
                {"kind": "wye", "bus": bus, "phase": ph,
                 "s": _enc_c((p_kw + 1j * q_kvar) * 1e3 / S_BASE_1PH)}
            )
    for bus, entries in IEEE13_DELTA_LOADS.items():
        for phs, (p_kw, q_kvar) in entries.items():
            loads.append(
                {"kind": "delta", "bus": bus, "phases": phs,
                 "s": _enc_c((p_kw + 1j * q_kvar) * 1e3 / S_BASE_1PH)}
            )

    return {
        "schema": "acpflow-zbus-network/1",
        "name": "ieee13",
        "buses": [{"id": b, "phases": IEEE13_PHASING[b]} for b in IEEE13_ORDER],
        "slack": {"bus": "650", "voltage": _slack_voltage_pu("abc")},
        "lines": lines,
        "shunts": shunts,
        "loads": loads,
    }


def build_ieee13_reference() -> RefNetwork3ph:
    buses = []
    for num, name in enumerate(IEEE13_ORDER):
        connect = "D" if name in IEEE13_DELTA_LOADS else "Y"
        loads = [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]
        if name in IEEE13_WYE_LOADS:
            for ph, pq in IEEE13_WYE_LOADS[name].items():
                loads["abc".index(ph)] = pq
        if name in IEEE13_DELTA_LOADS:
            slot = {"ab": 0, "bc": 1, "ca": 2}
            for phs, pq in IEEE13_DELTA_LOADS[name].items():
                loads[slot[phs]] = pq
        buses.append(
            RefBus(name, num, "S" if num == 0 else "PQ", connect, tuple(loads))
        )

    ref_lines = []
    for fbus, tbus, cfg, length in IEEE13_LINES:
        z3, b3 = _cfg_matrices(cfg)
        ref_lines.append(
            RefLine(fbus, tbus, z3 * length / FT_PER_MILE, b3 * 1e-6 * length / FT_PER_MILE)
        )
    ref_lines.append(
        RefLine("671", "692", SWITCH_Z_OHM * np.eye(3, dtype=complex), np.zeros((3, 3)))
    )
    transformers = [RefTransformer("633", "634", "wye-g", "wye-g", XFMR_Z_OHM)]
    caps = [RefCapacitor(b, kv, c, q) for b, kv, c, q in IEEE13_CAPS]
    return RefNetwork3ph(buses, ref_lines, transformers, caps, V_BASE_PH, n_iter=40)


def write_ieee13(out_dir: Path) -> None:
    doc = build_ieee13_json()
    (out_dir / "ieee13.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")

    ref = build_ieee13_reference()
    v_all = ref.zbus_pf() / V_BASE_PH
    rows = ["node_phase,vmag_pu,angle_deg"]
    for num, name in enumerate(IEEE13_ORDER):
        if num == 0:
            continue  # slack phases are fixed, not solved
        for k, ph in enumerate("abc"):
            if ph not in IEEE13_PHASING[name]:
                continue
            v = v_all[3 * num + k]
            rows.append(
                f"{name}.{ph},{float(abs(v))!r},{float(np.degrees(np.angle(v)))!r}"
            )
    (out_dir / "ieee13_reference.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    # cross-check the shipped fixture against the reference profile
    net = parse_distribution_json((out_dir / "ieee13.json").read_text())
    model = build_zbus_model(net)
    res = zbus_iterate(model)
    ids = model.reduced_ids()
    ref_map = {}
    for row in rows[1:]:
        npid, mag, ang = row.split(",")
        ref_map[npid] = float(mag)
    dev = max(abs(abs(res.v[k]) - ref_map[i]) for k, i in enumerate(ids))
    print(f"  ieee13: solver vs OPEN-port reference max |dV| = {dev:.3e} p.u. "
          f"(converged={res.converged}, iters={res.iterations})")
    if not (res.converged and dev < 1e-4):
        raise SystemExit("ieee13 fixture/reference cross-check failed")


# ---------------------------------------------------------------------------
# Synthetic stand-ins
# ---------------------------------------------------------------------------


def _radial_feeder(
    name: str,
    n_buses: int,
    seed: int,
    n_loads: int,
    line_len_ft: tuple[float, float],
    load_kva: tuple[float, float],
    v_base_ph: float,
    s_base: float,
) -> dict:
    """Random radial MV feeder: three-phase trunk, mixed-phasing laterals.

    Line segments reuse the IEEE13 configuration impedance matrices; a
    lateral keeps one phasing for its whole length, mimicking how two-phase
    and single-phase taps hang off a distribution trunk.
    """
    rng = np.random.default_rng(seed)
    z_base = v_base_ph**2 / s_base

    bus_ids = [f"bus{k}" for k in range(n_buses)]
    trunk_end = max(2, int(0.3 * n_buses))
    phasing = {bus_ids[k]: "abc" for k in range(trunk_end + 1)}
    parent = {k: k - 1 for k in range(1, trunk_end + 1)}

    lateral_phase_choices = ["abc", "abc", "ab", "bc", "ac", "a", "b", "c"]
    current_tail: int | None = None
    for k in range(trunk_end + 1, n_buses):
        if current_tail is None or rng.random() < 0.18:
            head = int(rng.integers(0, trunk_end + 1))  # new lateral off the trunk
            phs = lateral_phase_choices[int(rng.integers(0, len(lateral_phase_choices)))]
            parent[k] = head
        else:
            parent[k] = current_tail
            phs = phasing[bus_ids[current_tail]]
        phasing[bus_ids[k]] = phs
        current_tail = k

    cfg_for = {3: ["601", "602", "606"], 2: ["603", "604"], 1: ["605", "607"]}

    lines = []
    for k in range(1, n_buses):
        child = bus_ids[k]
        par = bus_ids[parent[k]]
        phases = "".join(p for p in phasing[child] if p in phasing[par])
        phasing[child] = phases
        cfg = cfg_for[len(phases)][int(rng.integers(0, len(cfg_for[len(phases)])))]
        z3, b3 = _cfg_matrices(cfg)
        native = [i for i in range(3) if z3[i, i] != 0]
        z_seg = z3[np.ix_(native, native)]
        b_seg = b3[np.ix_(native, native)]
        length = rng.uniform(*line_len_ft) / FT_PER_MILE
        y_series = np.linalg.inv(z_seg * length) * z_base
        y_shunt = b_seg * 1e-6 * length * z_base
        lines.append(_line_entry(par, child, phases, y_series, y_shunt))

    loads = []
    chosen = rng.choice(np.arange(1, n_buses), size=min(n_loads, n_buses - 1), replace=False)
    for c in sorted(chosen):
        bus = bus_ids[int(c)]
        phs = phasing[bus]
        kva = rng.uniform(*load_kva)
        pf = rng.uniform(0.85, 0.98)
        s = kva * 1e3 * (pf + 1j * np.sqrt(1 - pf**2)) / s_base
        if len(phs) == 3:
            if rng.random() < 0.3:
                pair = ["ab", "bc", "ca"][int(rng.integers(0, 3))]
                loads.append({"kind": "delta", "bus": bus, "phases": pair, "s": _enc_c(s)})
            else:
                # balanced-ish three-phase wye customer
                for ph in "abc":
                    loads.append(
                        {"kind": "wye", "bus": bus, "phase": ph, "s": _enc_c(s / 3)}
                    )
        else:
            ph = phs[int(rng.integers(0, len(phs)))]
            loads.append({"kind": "wye", "bus": bus, "phase": ph, "s": _enc_c(s)})

    return {
        "schema": "acpflow-zbus-network/1",
        "name": name,
        "buses": [{"id": b, "phases": phasing[b]} for b in bus_ids],
        "slack": {"bus": bus_ids[0], "voltage": _slack_voltage_pu("abc", 1.05)},
        "lines": lines,
        "shunts": [],
        "loads": loads,
    }


def _check_feeder(doc: dict, expect_phases: int | None) -> None:
    net = parse_distribution_json(json.dumps(doc))
    if expect_phases is not None and net.n_phases != expect_phases:
        raise SystemExit(f"{doc['name']}: {net.n_phases} node-phases, wanted {expect_phases}")
    model = build_zbus_model(net)
    res = zbus_iterate(model)
    vmin = np.abs(res.v).min()
    vmax = np.abs(res.v).max()
    print(
        f"  {doc['name']}: {net.n_phases} node-phases, {len(net.loads)} loads, "
        f"converged={res.converged} iters={res.iterations} "
        f"residual={res.residual_inf:.2e} |V| in [{vmin:.3f}, {vmax:.3f}]"
    )
    if not (res.converged and res.residual_inf < 1e-6 and 0.85 < vmin and vmax < 1.10):
        raise SystemExit(f"{doc['name']}: stand-in failed its solve check")


def main() -> int:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else _HERE.parent / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)

    print("ieee13:")
    write_ieee13(out_dir)

    print("ieee123 stand-in:")
    doc123 = _radial_feeder(
        "ieee123-standin", 123, seed=123001, n_loads=85,
        line_len_ft=(100.0, 450.0), load_kva=(8.0, 26.0),
        v_base_ph=V_BASE_PH, s_base=S_BASE_1PH,
    )
    _check_feeder(doc123, None)
    (out_dir / "ieee123.json").write_text(json.dumps(doc123, indent=1), encoding="utf-8")

    print("eulv stand-in:")
    # 908 buses x abc = 2724 node-phases; LV cable impedances approximated by
    # scaled MV configs is wrong physically, so use a dedicated LV matrix.
    doc_eulv = _build_eulv(seed=906001)
    _check_feeder(doc_eulv, 2724)
    (out_dir / "eulv.json").write_text(json.dumps(doc_eulv, indent=1), encoding="utf-8")
    return 0


def _build_eulv(seed: int) -> dict:
    """LV feeder stand-in: 908 three-phase buses, 55 single-phase loads."""
    rng = np.random.default_rng(seed)
    n_buses = 908
    v_base = 416.0 / np.sqrt(3)
    s_base = 1e5  # 100 kVA per phase
    z_base = v_base**2 / s_base

    # 4-core LV main (ohm/km): self and mutual terms of a 185 mm2 cable,
    # service drops use a lighter 35 mm2 cable
    z_main = np.array(
        [[0.164 + 0.078j, 0.049 + 0.030j, 0.049 + 0.030j],
         [0.049 + 0.030j, 0.164 + 0.078j, 0.049 + 0.030j],
         [0.049 + 0.030j, 0.049 + 0.030j, 0.164 + 0.078j]]
    )
    z_serv = np.array(
        [[0.851 + 0.041j, 0.049 + 0.025j, 0.049 + 0.025j],
         [0.049 + 0.025j, 0.851 + 0.041j, 0.049 + 0.025j],
         [0.049 + 0.025j, 0.049 + 0.025j, 0.851 + 0.041j]]
    )

    bus_ids = [f"n{k}" for k in range(n_buses)]
    lines = []
    trunk_end = 120  # main cable run; everything else is short laterals
    current_tail: int | None = None
    depth = 0
    for k in range(1, n_buses):
        if k <= trunk_end:
            par = k - 1
            z = z_main * rng.uniform(0.003, 0.012)  # km
        else:
            if current_tail is None or depth >= 8 or rng.random() < 0.2:
                par = int(rng.integers(0, trunk_end + 1))
                depth = 0
            else:
                par = current_tail
            depth += 1
            current_tail = k
            main = rng.random() < 0.3
            z = (z_main if main else z_serv) * rng.uniform(0.005, 0.02)
        y_series = np.linalg.inv(z) * z_base
        lines.append(_line_entry(bus_ids[par], bus_ids[k], "abc", y_series))

    loads = []
    chosen = rng.choice(np.arange(1, n_buses), size=55, replace=False)
    for c in sorted(chosen):
        kw = rng.uniform(1.0, 5.0)
        pf = rng.uniform(0.92, 0.99)
        s = kw * 1e3 / pf * (pf + 1j * np.sqrt(1 - pf**2)) / s_base
        ph = "abc"[int(rng.integers(0, 3))]
        loads.append({"kind": "wye", "bus": bus_ids[c], "phase": ph, "s": _enc_c(s)})

    return {
        "schema": "acpflow-zbus-network/1",
        "name": "eulv-standin",
        "buses": [{"id": b, "phases": "abc"} for b in bus_ids],
        "slack": {"bus": bus_ids[0], "voltage": _slack_voltage_pu("abc", 1.05)},
        "lines": lines,
        "shunts": [],
        "loads": loads,
    }


if __name__ == "__main__":
    sys.exit(main())
