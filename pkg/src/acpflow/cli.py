"""Command-line driver: solve, verify, bench, and convert.

Exit codes are a stable contract: 0 on success, 1 on input/config errors,
2 on numerical non-convergence or verification failure. Errors go to stderr
as ``error: <code>: message`` with code one of input/schema/io/reference.

The CLI itself stays single-threaded; parallelism is delegated to the batch
engine via ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import batch as batch_mod
from . import distribution as dist_mod
from . import network as net_mod
from . import transmission as tx_mod
from .sparse import GmresOptions

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

_BENCH_SIZES = (1, 8, 64, 256, 1024)


class CliInputError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def _fail(code: str, message: str) -> int:
    print(f"error: {code}: {message}", file=sys.stderr)
    return EXIT_INPUT


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.exists():
        raise CliInputError("io", f"no such file: {path}")
    try:
        return p.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliInputError("io", f"cannot read {path}: {exc}") from exc


def _sniff_kind(path: str, kind: str | None, text: str) -> str:
    if kind:
        return kind
    if path.endswith(".m"):
        return "tx"
    if path.endswith(".json"):
        try:
            schema = json.loads(text).get("schema", "")
        except (json.JSONDecodeError, AttributeError):
            schema = ""
        if schema == dist_mod.ZBUS_SCHEMA:
            return "dist"
        if schema == net_mod.TXNET_SCHEMA:
            return "tx"
        raise CliInputError(
            "schema", f"{path}: cannot infer network kind; pass --kind"
        )
    raise CliInputError("input", f"{path}: cannot infer network kind; pass --kind")


def _load_tx(path: str, text: str) -> net_mod.TransmissionNetwork:
    if path.endswith(".json"):
        return net_mod.network_from_json(text)
    return net_mod.parse_matpower_case(text)


def _write_out(out: str | None, payload: str) -> None:
    if out:
        Path(out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)


def _newton_options(args, precond: str | None = None) -> tx_mod.NewtonOptions:
    opts = tx_mod.NewtonOptions()
    if args.tol is not None:
        opts.tol_mismatch = args.tol
    if precond is not None:
        opts.precond = precond
    return opts


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    text = _read_text(args.case)
    kind = _sniff_kind(args.case, args.kind, text)
    spec = batch_mod.ScenarioSpec(
        count=args.batch,
        seed=args.seed,
        spread=args.spread,
        target="transmission" if kind == "tx" else "distribution",
    )

    if kind == "tx":
        net = _load_tx(args.case, text)
        model = tx_mod.build_transmission_model(net)
        base = batch_mod.transmission_base(net, model.part)
        opts = _newton_options(args, args.precond)
        solver = lambda sc: tx_mod.newton_solve(model, sc, opts)  # noqa: E731
    else:
        net = dist_mod.parse_distribution_json(text)
        model = dist_mod.build_zbus_model(net)
        base = batch_mod.distribution_base(model)
        fp_opts = dist_mod.FixedPointOptions()
        if args.tol is not None:
            fp_opts.tol = args.tol
        solver = lambda sc: dist_mod.zbus_iterate(model, sc, fp_opts)  # noqa: E731

    scenarios = batch_mod.make_scenarios(base, spec)
    if args.verbose:
        print(
            f"solving {spec.count} scenario(s) on {args.workers} worker(s), "
            f"seed {spec.seed}, spread {spec.spread}",
            file=sys.stderr,
        )
    report = batch_mod.run_batch(solver, scenarios, worker_count=args.workers)
    if args.verbose:
        print(
            f"{report.n_converged}/{len(report.records)} converged in "
            f"{report.total_wall_time:.3f}s",
            file=sys.stderr,
        )

    if args.format == "csv":
        _write_out(args.out, batch_mod.report_to_csv(report))
    else:
        doc = {
            "schema": "acpflow-solve-result/1",
            "case": Path(args.case).name,
            "kind": kind,
            "seed": args.seed,
            "spread": args.spread,
            "batch": args.batch,
            "report": batch_mod.report_to_dict(report),
            "solutions": _solutions_block(kind, model, report),
        }
        _write_out(args.out, json.dumps(doc, indent=1) + "\n")

    return EXIT_OK if report.n_converged == len(report.records) else EXIT_NUMERICAL


def _solutions_block(kind: str, model, report: batch_mod.BatchReport):
    if kind == "tx":
        return [
            {
                "index": i,
                "theta": list(res.state.theta) if res is not None else None,
                "vmag": list(res.state.vmag) if res is not None else None,
            }
            for i, res in enumerate(report.results)
        ]
    ids = model.reduced_ids()
    return {
        "node_phase_ids": ids,
        "records": [
            {
                "index": i,
                "v_re": list(res.v.real) if res is not None else None,
                "v_im": list(res.v.imag) if res is not None else None,
            }
            for i, res in enumerate(report.results)
        ],
    }


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    text = _read_text(args.case)
    kind = _sniff_kind(args.case, args.kind, text)

    if kind == "tx":
        net = _load_tx(args.case, text)
        model = tx_mod.build_transmission_model(net)
        opts = tx_mod.NewtonOptions(
            tol_mismatch=1e-10, gmres=GmresOptions(tol=1e-12, restart=80, max_outer=10)
        )
        main_res = tx_mod.newton_solve(model, opts=opts)
        oracle_res = tx_mod.dense_newton_oracle(model, opts=opts)
        dtheta = float(np.abs(main_res.state.theta - oracle_res.state.theta).max())
        dvmag = float(np.abs(main_res.state.vmag - oracle_res.state.vmag).max())
        dev = max(dtheta, dvmag)
        threshold = args.tol if args.tol is not None else 1e-10
        print("quantity                     value")
        print(f"max |dtheta| vs oracle       {dtheta:.3e}")
        print(f"max |dvmag|  vs oracle       {dvmag:.3e}")
        print(f"max deviation                {dev:.3e}  (threshold {threshold:.1e})")
        print(f"solver converged             {main_res.converged}")
        print(f"oracle converged             {oracle_res.converged}")
        ok = main_res.converged and oracle_res.converged and dev < threshold
        return EXIT_OK if ok else EXIT_NUMERICAL

    net = dist_mod.parse_distribution_json(text)
    model = dist_mod.build_zbus_model(net)
    ref_path = args.oracle or str(Path(args.case).with_suffix("")) + "_reference.csv"
    if not Path(ref_path).exists():
        raise CliInputError("reference", f"missing reference fixture: {ref_path}")
    try:
        ids, ref_mag, _ref_ang = dist_mod.read_reference_voltages(ref_path)
    except ValueError as exc:
        raise CliInputError("reference", str(exc)) from exc
    res = dist_mod.zbus_iterate(model)
    pos = {npid: k for k, npid in enumerate(model.reduced_ids())}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise CliInputError(
            "reference", f"reference ids not in network: {missing[:5]}"
        )
    got = np.array([np.abs(res.v[pos[i]]) for i in ids])
    dev = float(np.abs(got - ref_mag).max())
    threshold = args.tol if args.tol is not None else 1e-3
    print("quantity                     value")
    print(f"node-phases compared         {len(ids)}")
    print(f"max |dVmag| vs reference     {dev:.3e}  (threshold {threshold:.1e})")
    print(f"solver converged             {res.converged}")
    ok = res.converged and dev < threshold
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    text = _read_text(args.case)
    kind = _sniff_kind(args.case, args.kind, text)
    max_batch = args.batch if args.batch else _BENCH_SIZES[-1]
    sizes = [s for s in _BENCH_SIZES if s <= max_batch] or [max_batch]
    if max_batch not in sizes and max_batch > _BENCH_SIZES[-1]:
        sizes.append(max_batch)
    workers = sorted({1, args.workers})

    if kind == "tx":
        net = _load_tx(args.case, text)
        model = tx_mod.build_transmission_model(net)
        base = batch_mod.transmission_base(net, model.part)
        opts = _newton_options(args, args.precond)
        solver = lambda sc: tx_mod.newton_solve(model, sc, opts)  # noqa: E731
    else:
        net = dist_mod.parse_distribution_json(text)
        model = dist_mod.build_zbus_model(net)
        base = batch_mod.distribution_base(model)
        solver = lambda sc: dist_mod.zbus_iterate(model, sc)  # noqa: E731

    spec = batch_mod.ScenarioSpec(
        count=max(sizes),
        seed=args.seed,
        spread=args.spread,
        target="transmission" if kind == "tx" else "distribution",
    )
    pool = batch_mod.make_scenarios(base, spec)

    lines = ["case,kind,batch_size,workers,n_converged,total_wall_time,throughput"]
    for size in sizes:
        for wc in workers:
            report = batch_mod.run_batch(
                solver, pool[:size], worker_count=wc, keep_results=False
            )
            lines.append(
                f"{Path(args.case).name},{kind},{size},{wc},"
                f"{report.n_converged},{report.total_wall_time!r},{report.throughput!r}"
            )
    _write_out(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------


def cmd_convert(args) -> int:
    text = _read_text(args.case)
    kind = _sniff_kind(args.case, args.kind, text)
    if kind == "tx":
        net = _load_tx(args.case, text)
        for name in net.ignored_fields:
            print(f"warning: mpc.{name} has no JSON equivalent, dropped", file=sys.stderr)
        _write_out(args.out, net_mod.network_to_json(net) + "\n")
    else:
        net = dist_mod.parse_distribution_json(text)
        _write_out(args.out, dist_mod.distribution_to_json(net) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", required=True, help="network case file (.m or .json)")
    p.add_argument("--kind", choices=("tx", "dist"), help="network kind (inferred if omitted)")
    p.add_argument("--batch", type=int, default=1, help="scenario batch size")
    p.add_argument("--seed", type=int, default=0, help="64-bit scenario seed")
    p.add_argument("--spread", type=float, default=0.2, help="load multiplier half-range")
    p.add_argument("--tol", type=float, default=None, help="solver/verify tolerance override")
    p.add_argument("--workers", type=int, default=1, help="parallel worker count")
    p.add_argument("--out", default=None, help="output path (stdout if omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument(
        "--precond",
        choices=("fd", "none"),
        default="fd",
        help="GMRES preconditioner for the transmission solver",
    )
    p.add_argument("--oracle", default=None, help="reference fixture path (verify)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acpflow",
        description="Batched AC power flow: Newton-Raphson (transmission) and "
        "three-phase Z-Bus current injection (distribution).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("solve", cmd_solve, "solve a seeded scenario batch and write results"),
        ("verify", cmd_verify, "compare solutions against the oracle or reference"),
        ("bench", cmd_bench, "sweep batch sizes x workers and emit a throughput CSV"),
        ("convert", cmd_convert, "convert case files to canonical JSON"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliInputError as exc:
        return _fail(exc.code, str(exc))
    except (net_mod.CaseParseError, dist_mod.SchemaError) as exc:
        return _fail("schema", str(exc))
    except (ValueError, OSError) as exc:
        return _fail("input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
