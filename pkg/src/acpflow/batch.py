"""Seeded scenario batches and data-parallel dispatch over both solvers.

Scenario randomness is counter-based: scenario i's multipliers come from a
Philox stream keyed by (seed, i), so the numbers drawn for one scenario do
not depend on batch size, worker count, or platform. Batch dispatch forks
worker processes that inherit the immutable model; per-scenario results are
collected by index, making the report independent of scheduling.
"""

from __future__ import annotations

import concurrent.futures
import multiprocessing
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .distribution import DistributionScenario, ZBusModel
from .network import BusPartition, TransmissionNetwork
from .transmission import TransmissionScenario


@dataclass(frozen=True)
class ScenarioSpec:
    """Batch description: size, 64-bit seed, multiplier half-range, solver family."""

    count: int
    seed: int
    spread: float = 0.2
    target: str = "transmission"  # "transmission" | "distribution"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.spread < 1:
            raise ValueError("spread must satisfy 0 <= spread < 1")
        if self.target not in ("transmission", "distribution"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")


def generate_load_multipliers(spec: ScenarioSpec, n_elements: int) -> np.ndarray:
    """(count, n_elements) multipliers, i.i.d. uniform on [1-spread, 1+spread].

    Element (i, j) depends only on (seed, i, j): each scenario uses its own
    Philox stream keyed by (seed, scenario index), and element j is the j-th
    draw of that stream. Identical specs reproduce identical arrays on any
    platform and for any worker count.
    """
    out = np.empty((spec.count, n_elements))
    lo = 1.0 - spec.spread
    width = 2.0 * spec.spread
    for i in range(spec.count):
        bits = np.random.Philox(key=np.array([spec.seed, i], dtype=np.uint64))
        u = np.random.Generator(bits).random(n_elements)
        out[i] = lo + width * u
    return out


# ---------------------------------------------------------------------------
# Applying multipliers to base loads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransmissionBase:
    """Base loads split out of the net injections so only loads get scaled."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    part: BusPartition
    load_elements: np.ndarray  # bus indices with nonzero base load

    @property
    def n_elements(self) -> int:
        return self.load_elements.size


@dataclass(frozen=True)
class DistributionBase:
    """Base complex powers per load, in the model's original load order."""

    wye_s: np.ndarray
    delta_s: np.ndarray
    load_kinds: tuple[str, ...]

    @property
    def n_elements(self) -> int:
        return len(self.load_kinds)


def transmission_base(net: TransmissionNetwork, part: BusPartition) -> TransmissionBase:
    p_load = np.array([b.p_load for b in net.buses])
    q_load = np.array([b.q_load for b in net.buses])
    p_gen = np.array([b.p_gen for b in net.buses])
    q_gen = np.array([b.q_gen for b in net.buses])
    elements = np.flatnonzero((p_load != 0.0) | (q_load != 0.0))
    return TransmissionBase(
        p_load=p_load,
        q_load=q_load,
        p_gen=p_gen,
        q_gen=q_gen,
        part=part,
        load_elements=elements,
    )


def distribution_base(model: ZBusModel) -> DistributionBase:
    return DistributionBase(
        wye_s=model.wye_s.copy(),
        delta_s=model.delta_s.copy(),
        load_kinds=model.load_kinds,
    )


def apply_multipliers(
    base: TransmissionBase | DistributionBase, multipliers: np.ndarray
) -> TransmissionScenario | DistributionScenario:
    """Scale each load element by its multiplier; generation stays untouched.

    One multiplier per load element: for transmission an element is a bus
    with nonzero base load (its P and Q scale together, preserving power
    factor); for distribution it is one wye or delta load whose complex
    power scales.
    """
    multipliers = np.asarray(multipliers, dtype=np.float64)
    if multipliers.shape != (base.n_elements,):
        raise ValueError(
            f"expected {base.n_elements} multipliers, got shape {multipliers.shape}"
        )
    if isinstance(base, TransmissionBase):
        p = base.p_load.copy()
        q = base.q_load.copy()
        p[base.load_elements] *= multipliers
        q[base.load_elements] *= multipliers
        part = base.part
        return TransmissionScenario(
            p_spec=(base.p_gen - p)[part.theta_block],
            q_spec=(base.q_gen - q)[part.q_block],
        )
    kinds = np.array(base.load_kinds)
    wye_m = multipliers[kinds == "wye"]
    delta_m = multipliers[kinds == "delta"]
    return DistributionScenario(
        wye_s=base.wye_s * wye_m, delta_s=base.delta_s * delta_m
    )


def make_scenarios(
    base: TransmissionBase | DistributionBase, spec: ScenarioSpec
) -> list[TransmissionScenario | DistributionScenario]:
    """Generate the full seeded batch of perturbed scenarios."""
    mult = generate_load_multipliers(spec, base.n_elements)
    return [apply_multipliers(base, mult[i]) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# Batch dispatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioRecord:
    index: int
    converged: bool
    iterations: int
    residual: float
    wall_time: float
    error: str | None = None


@dataclass(frozen=True)
class BatchReport:
    """Per-scenario convergence records plus batch aggregates.

    ``results`` keeps the raw solver outputs (ordered by scenario index) for
    callers that need solutions; serialization ignores it.
    """

    records: tuple[ScenarioRecord, ...]
    n_converged: int
    total_wall_time: float
    throughput: float
    worker_count: int
    results: tuple[Any, ...] = field(repr=False, default=())


_RESIDUAL_FIELDS = ("final_mismatch_inf", "residual_inf")

# fork-inherited payload for worker processes (index-only IPC)
_FORK_STATE: tuple[Callable, Sequence] | None = None


def _fork_call(i: int):
    fn, args = _FORK_STATE
    return fn(*args[i])


def _fork_map(fn: Callable, argtuples: Sequence[tuple], workers: int) -> list:
    """Order-preserving process map; arguments reach workers via fork, only
    indices and results cross the pipe."""
    global _FORK_STATE
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, len(argtuples) // (workers * 8))
    _FORK_STATE = (fn, argtuples)
    try:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, mp_context=ctx
        ) as pool:
            return list(pool.map(_fork_call, range(len(argtuples)), chunksize=chunk))
    finally:
        _FORK_STATE = None


@dataclass(frozen=True)
class _SlimOutcome:
    """Record-sized stand-in for a full result (keep_results=False batches)."""

    converged: bool
    iterations: int
    residual_inf: float
    diagnostic: str | None


def _timed_solve(
    solver: Callable, scenario, keep_result: bool = True
) -> tuple[Any, float, str | None]:
    t0 = time.perf_counter()
    try:
        result = solver(scenario)
        err = None
    except Exception as exc:  # poisoned scenario: isolate, don't kill the batch
        result = None
        err = f"{type(exc).__name__}: {exc}"
    if result is not None and not keep_result:
        residual = float("nan")
        for name in _RESIDUAL_FIELDS:
            if hasattr(result, name):
                residual = float(getattr(result, name))
                break
        result = _SlimOutcome(
            converged=bool(result.converged),
            iterations=int(result.iterations),
            residual_inf=residual,
            diagnostic=getattr(result, "diagnostic", None),
        )
    return result, time.perf_counter() - t0, err


def _to_record(index: int, result, wall: float, err: str | None) -> ScenarioRecord:
    if result is None:
        return ScenarioRecord(
            index=index,
            converged=False,
            iterations=0,
            residual=float("inf"),
            wall_time=wall,
            error=err,
        )
    residual = float("nan")
    for name in _RESIDUAL_FIELDS:
        if hasattr(result, name):
            residual = float(getattr(result, name))
            break
    return ScenarioRecord(
        index=index,
        converged=bool(result.converged),
        iterations=int(result.iterations),
        residual=residual,
        wall_time=wall,
        error=getattr(result, "diagnostic", None),
    )


def run_batch(
    solver: Callable[[Any], Any],
    scenarios: Sequence[Any],
    worker_count: int = 1,
    warmup: bool = True,
    keep_results: bool = True,
) -> BatchReport:
    """Solve every scenario and aggregate a report; order is preserved.

    Numeric record fields are identical for any ``worker_count`` because each
    scenario solve is deterministic and isolated; only wall-clock fields vary
    between runs. An untimed warm-up run of the first scenario precedes
    measurement (in the parallel path it also spins up and warms the worker
    pool), mirroring the usual exclusion of one warm-up batch from reported
    throughput; pass ``warmup=False`` to skip it. Scenario failures are
    recorded per scenario and never abort the batch. With
    ``keep_results=False`` only record-sized outcomes travel back from the
    workers (use for very large batches where full solution vectors would
    not fit in memory).
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("empty scenario batch")

    if worker_count == 1 or len(scenarios) == 1:
        if warmup:
            _timed_solve(solver, scenarios[0], keep_results)
        t0 = time.perf_counter()
        outcomes = [_timed_solve(solver, sc, keep_results) for sc in scenarios]
        total = time.perf_counter() - t0
    else:
        global _FORK_STATE
        ctx = multiprocessing.get_context("fork")
        args = [(solver, sc, keep_results) for sc in scenarios]
        chunk = max(1, len(args) // (worker_count * 8))
        _FORK_STATE = (_timed_solve, args)
        try:
            with concurrent.futures.ProcessPoolExecutor(
                max_workers=worker_count, mp_context=ctx
            ) as pool:
                if warmup:
                    # one warm-up task per worker, excluded from timing
                    warm = [pool.submit(_fork_call, 0) for _ in range(worker_count)]
                    concurrent.futures.wait(warm)
                t0 = time.perf_counter()
                outcomes = list(pool.map(_fork_call, range(len(args)), chunksize=chunk))
                total = time.perf_counter() - t0
        finally:
            _FORK_STATE = None

    records = tuple(
        _to_record(i, res, wall, err) for i, (res, wall, err) in enumerate(outcomes)
    )
    results = tuple(res for res, _, _ in outcomes) if keep_results else ()
    n_converged = sum(1 for r in records if r.converged)
    return BatchReport(
        records=records,
        n_converged=n_converged,
        total_wall_time=total,
        throughput=len(records) / total if total > 0 else float("inf"),
        worker_count=worker_count,
        results=results,
    )


# ---------------------------------------------------------------------------
# Report serialization (timing fields segregated for determinism checks)
# ---------------------------------------------------------------------------


def report_to_dict(report: BatchReport) -> dict:
    return {
        "schema": "acpflow-batch-report/1",
        "aggregate": {
            "count": len(report.records),
            "n_converged": report.n_converged,
            "worker_count": report.worker_count,
            "timing": {
                "total_wall_time": report.total_wall_time,
                "throughput": report.throughput,
            },
        },
        "records": [
            {
                "index": r.index,
                "converged": r.converged,
                "iterations": r.iterations,
                "residual": r.residual,
                "error": r.error,
                "timing": {"wall_time": r.wall_time},
            }
            for r in report.records
        ],
    }


def report_to_csv(report: BatchReport) -> str:
    """CSV rows ordered by scenario index; timing columns carry a wall_time
    prefix so determinism checks can drop them mechanically."""
    lines = ["index,converged,iterations,residual,error,wall_time"]
    for r in report.records:
        err = (r.error or "").replace(",", ";").replace("\n", " ")
        lines.append(
            f"{r.index},{int(r.converged)},{r.iterations},{r.residual!r},{err},{r.wall_time!r}"
        )
    return "\n".join(lines) + "\n"
