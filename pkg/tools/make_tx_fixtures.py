#!/usr/bin/env python3
"""Generate the transmission test fixtures as MATPOWER-format case files.

Canonical public case files cannot be vendored here, so these are
deterministic synthetic stand-ins at the published scales (118, 1354 and
2224 buses) with realistic topology statistics: a locality-biased spanning
tree plus meshing chords, a mix of PV/PQ buses, transformer branches with
off-nominal taps and small phase shifts, bus shunts, and loading levels
chosen so Newton-Raphson from a flat start converges comfortably for the
base case and +/-20% load perturbations.

Each file records its generator seed in a header comment. Regenerate with:

    python tools/make_tx_fixtures.py [output_dir]
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from acpflow import (  # noqa: E402
    build_transmission_model,
    dense_newton_oracle,
    newton_solve,
    parse_matpower_case,
)
from acpflow.transmission import NewtonOptions, TransmissionScenario  # noqa: E402


def synth_case(name: str, n: int, seed: int, gen_frac: float, load_level: float) -> str:
    """Build one synthetic case and return its MATPOWER text."""
    rng = np.random.default_rng(seed)

    # hubs form a low-impedance backbone ring (EHV corridors); every other
    # bus hangs off the tree with locality bias, plus ~45% meshing chords
    n_hubs = max(4, n // 40)
    hubs = np.linspace(0, n - 1, n_hubs, dtype=int).tolist()
    edges: list[tuple[int, int, str]] = []
    for k in range(n_hubs):
        edges.append((hubs[k], hubs[(k + 1) % n_hubs], "backbone"))
    for k in range(0, n_hubs - n_hubs // 2, 2):  # cross-ring corridors
        edges.append((hubs[k], hubs[k + n_hubs // 2], "backbone"))

    in_tree = set(hubs)
    order = [i for i in range(n) if i not in in_tree]
    for i in order:
        candidates = [h for h in in_tree if abs(h - i) <= 30]
        j = int(rng.choice(candidates)) if candidates else int(min(in_tree, key=lambda h: abs(h - i)))
        edges.append((min(i, j), max(i, j), "line"))
        in_tree.add(i)

    n_chords = int(0.45 * n)
    have = {(a, b) for a, b, _ in edges}
    tries = 0
    while tries < 40 * n_chords and n_chords > 0:
        tries += 1
        a = int(rng.integers(0, n))
        b = min(n - 1, a + int(1 + rng.geometric(0.12)))
        if a == b or (a, b) in have:
            continue
        have.add((a, b))
        edges.append((a, b, "line"))
        n_chords -= 1

    # bus roles: slack at 0, PV spread evenly (hubs preferred), the rest PQ
    n_pv = max(1, int(gen_frac * n) - 1)
    pv_buses = set(h for h in hubs if h != 0)
    extra = np.linspace(1, n - 1, max(0, n_pv - len(pv_buses)) + 2, dtype=int)
    for e in extra:
        if len(pv_buses) >= n_pv:
            break
        if e != 0:
            pv_buses.add(int(e))

    # loads on ~72% of buses
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    loaded = rng.random(n) < 0.72
    loaded[0] = False
    p_load[loaded] = rng.uniform(0.05, 1.2, loaded.sum()) * load_level
    q_load[loaded] = p_load[loaded] * rng.uniform(0.15, 0.40, loaded.sum())

    # dispatch PV generation to cover ~65% of load; slack covers the rest
    total_load = p_load.sum()
    pv_list = sorted(pv_buses)
    weights = rng.uniform(0.5, 1.5, len(pv_list))
    pg = 0.65 * total_load * weights / weights.sum()

    # capacitive shunts at a few percent of buses
    bs = np.zeros(n)
    shunted = rng.random(n) < 0.04
    bs[shunted] = rng.uniform(0.02, 0.25, shunted.sum())

    base_mva = 100.0
    bus_rows = []
    for i in range(n):
        if i == 0:
            btype = 3
        elif i in pv_buses:
            btype = 2
        else:
            btype = 1
        bus_rows.append(
            f"\t{i + 1}\t{btype}\t{p_load[i] * base_mva:.4f}\t{q_load[i] * base_mva:.4f}"
            f"\t0\t{bs[i] * base_mva:.4f}\t1\t1.0\t0\t345\t1\t1.1\t0.9;"
        )

    gen_rows = [f"\t1\t0\t0\t9999\t-9999\t1.035\t{base_mva}\t1\t9999\t-9999;"]
    for k, i in enumerate(pv_list):
        vset = rng.uniform(1.01, 1.05)
        gen_rows.append(
            f"\t{i + 1}\t{pg[k] * base_mva:.4f}\t0\t9999\t-9999\t{vset:.4f}"
            f"\t{base_mva}\t1\t9999\t-9999;"
        )

    branch_rows = []
    for a, b, kind in edges:
        if kind == "backbone":
            x = rng.uniform(0.004, 0.02)
            r = x * rng.uniform(0.05, 0.15)
            bch = rng.uniform(0.02, 0.20)
            tap, shift = 0.0, 0.0
        elif rng.random() < 0.08:  # transformer branch
            x = rng.uniform(0.02, 0.10)
            r = x * rng.uniform(0.02, 0.10)
            tap = rng.uniform(0.97, 1.03)
            shift = rng.uniform(-2.0, 2.0) if rng.random() < 0.3 else 0.0
            bch = 0.0
        else:
            x = rng.uniform(0.01, 0.08)
            r = x * rng.uniform(0.08, 0.35)
            tap = 0.0  # MATPOWER convention: 0 means nominal
            shift = 0.0
            bch = rng.uniform(0.0, 0.06)
        branch_rows.append(
            f"\t{a + 1}\t{b + 1}\t{r:.6f}\t{x:.6f}\t{bch:.5f}"
            f"\t0\t0\t0\t{tap:.4f}\t{shift:.3f}\t1;"
        )

    return (
        f"function mpc = {name}\n"
        f"% synthetic stand-in case at the {n}-bus scale (generator seed {seed})\n"
        f"% produced by tools/make_tx_fixtures.py; not the canonical public case\n"
        "mpc.version = '2';\n"
        f"mpc.baseMVA = {base_mva};\n"
        "\n%% bus data\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin\n"
        "mpc.bus = [\n" + "\n".join(bus_rows) + "\n];\n"
        "\n%% generator data\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin\n"
        "mpc.gen = [\n" + "\n".join(gen_rows) + "\n];\n"
        "\n%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\n"
        "mpc.branch = [\n" + "\n".join(branch_rows) + "\n];\n"
    )


def _stressed(base, factor: float) -> TransmissionScenario:
    from acpflow.batch import apply_multipliers

    return apply_multipliers(base, np.full(base.n_elements, factor))


def check_case(text: str, name: str, use_oracle: bool) -> bool:
    """Base case and the +/-20% extremes must converge from a flat start."""
    from acpflow.batch import transmission_base

    net = parse_matpower_case(text)
    model = build_transmission_model(net)
    base = transmission_base(net, model.part)
    opts = NewtonOptions()
    ok = True
    for factor in (1.0, 0.8, 1.2):
        scen = _stressed(base, factor) if factor != 1.0 else None
        res = (
            dense_newton_oracle(model, scen, opts)
            if use_oracle
            else newton_solve(model, scen, opts)
        )
        vmin = res.state.vmag.min()
        vmax = res.state.vmag.max()
        ok = ok and res.converged and res.iterations <= 8 and 0.88 < vmin and vmax < 1.12
        print(
            f"  {name} x{factor}: converged={res.converged} iters={res.iterations} "
            f"V in [{vmin:.3f}, {vmax:.3f}]"
        )
    return ok


def main() -> int:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures"
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = [
        ("case118", 118, 118001, 0.45),
        ("case1354pegase", 1354, 1354001, 0.19),
        ("gb2224", 2224, 2224001, 0.18),
    ]
    all_ok = True
    for name, n, seed, gen_frac in specs:
        print(f"{name}: {n} buses")
        text = None
        for load_level in (0.6, 0.45, 0.35, 0.25, 0.18):
            candidate = synth_case(name, n, seed, gen_frac, load_level)
            print(f"  trying load level {load_level}")
            if check_case(candidate, name, use_oracle=(n <= 200)):
                text = candidate
                break
        if text is None:
            print(f"  FAILED to find a robust loading for {name}")
            all_ok = False
            continue
        path = out_dir / f"{name}.m"
        path.write_text(text, encoding="utf-8")
        print(f"  wrote {path}")
    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
