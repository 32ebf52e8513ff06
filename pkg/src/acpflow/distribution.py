"""Three-phase unbalanced distribution power flow by Z-Bus current injection.

The network lives on node-phases (a bus contributes one node per present
phase). After separating slack and non-slack phases the solver iterates the
fixed point

    v  <-  Z i(v) + v0

where Z is the reduced bus-impedance operator (applied as a factorized solve
of the non-slack admittance block, never an explicit inverse), v0 the no-load
voltage profile, and i(v) the nonlinear current injections of the constant
power loads: a wye load s at phase p contributes -conj(s / v_p); a delta load
s across the ordered pair (p, q) draws the line current i_line =
conj(s / (v_p - v_q)), subtracted at p and added at q. With all loads zero
this reproduces v = v0 exactly, which pins the sign convention.

The iteration stops when the change in the sum of voltage magnitudes falls
below tolerance (or max_iter is hit); results additionally report the true
fixed-point residual as an independent certificate.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
from ._threads import single_thread_blas

ZBUS_SCHEMA = "acpflow-zbus-network/1"

PHASES = "abc"


class SchemaError(ValueError):
    """Distribution JSON violates the schema; message carries the JSON path."""


class VoltageFloorError(ValueError):
    """An iterate's voltage fell below the division-guard floor."""

    def __init__(self, node_phase: str, magnitude: float):
        self.node_phase = node_phase
        self.magnitude = magnitude
        super().__init__(
            f"voltage magnitude {magnitude:.3e} below floor at node-phase {node_phase}"
        )


class SingularYbusError(ValueError):
    """Non-slack admittance block is singular (isolated node-phase?)."""


@dataclass(frozen=True)
class LoadSpec:
    """Constant-power load: wye on one phase or delta across an ordered pair."""

    kind: str  # "wye" | "delta"
    bus: str
    phases: str  # one char for wye, two for delta
    s: complex


@dataclass(frozen=True)
class LineBlock:
    """Generalized two-port admittance element over a phase subset.

    Covers lines, switches and transformers alike: the four complex blocks
    are added into the node-phase admittance matrix as
    [[y_ff, y_ft], [y_tf, y_tt]].
    """

    from_bus: str
    to_bus: str
    phases: str
    y_ff: np.ndarray
    y_ft: np.ndarray
    y_tf: np.ndarray
    y_tt: np.ndarray


@dataclass(frozen=True)
class ShuntBlock:
    bus: str
    phases: str
    y: np.ndarray


@dataclass(frozen=True)
class ThreePhaseNetwork:
    """Indexed multi-phase network; immutable once parsed."""

    name: str
    buses: tuple[tuple[str, str], ...]  # (bus id, present phases)
    slack_bus: str
    slack_voltage: dict[str, complex]  # phase -> fixed complex p.u. voltage
    lines: tuple[LineBlock, ...]
    shunts: tuple[ShuntBlock, ...]
    loads: tuple[LoadSpec, ...]

    @property
    def node_phases(self) -> tuple[tuple[str, str], ...]:
        return tuple((bus, ph) for bus, phs in self.buses for ph in phs)

    @property
    def n_phases(self) -> int:
        return sum(len(phs) for _, phs in self.buses)

    def phase_index(self) -> dict[tuple[str, str], int]:
        return {np_: k for k, np_ in enumerate(self.node_phases)}

    def node_phase_ids(self) -> list[str]:
        return [f"{bus}.{ph}" for bus, ph in self.node_phases]

    def slack_phase_indices(self) -> np.ndarray:
        idx = self.phase_index()
        _, phs = next(b for b in self.buses if b[0] == self.slack_bus)
        return np.array([idx[(self.slack_bus, p)] for p in phs], dtype=np.int64)

    def slack_voltages(self) -> np.ndarray:
        _, phs = next(b for b in self.buses if b[0] == self.slack_bus)
        return np.array([self.slack_voltage[p] for p in phs], dtype=np.complex128)


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------


def _want(doc: dict, key: str, path: str):
    if key not in doc:
        raise SchemaError(f"{path}.{key}: missing required field")
    return doc[key]


def _cplx(obj, path: str) -> complex:
    if (
        not isinstance(obj, (list, tuple))
        or len(obj) != 2
        or not all(isinstance(x, (int, float)) for x in obj)
    ):
        raise SchemaError(f"{path}: expected complex as [re, im]")
    return complex(obj[0], obj[1])


def _cmat(obj, path: str, k: int) -> np.ndarray:
    if not isinstance(obj, list) or len(obj) != k:
        raise SchemaError(f"{path}: expected a {k}x{k} complex matrix")
    out = np.empty((k, k), dtype=np.complex128)
    for i, row in enumerate(obj):
        if not isinstance(row, list) or len(row) != k:
            raise SchemaError(f"{path}[{i}]: expected {k} entries")
        for j, cell in enumerate(row):
            out[i, j] = _cplx(cell, f"{path}[{i}][{j}]")
    return out


def _phase_subset(s, path: str, min_len: int = 1) -> str:
    if not isinstance(s, str) or len(s) < min_len or len(set(s)) != len(s):
        raise SchemaError(f"{path}: expected distinct phases from {PHASES!r}")
    if any(p not in PHASES for p in s):
        raise SchemaError(f"{path}: unknown phase in {s!r}")
    return "".join(p for p in PHASES if p in s)


def parse_distribution_json(text: str) -> ThreePhaseNetwork:
    """Parse and fully index a distribution network JSON document.

    Only constant-power loads are supported. Schema violations raise
    SchemaError with the offending JSON path; dangling node-phase references
    are rejected.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"$: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError("$: expected an object")
    if doc.get("schema") != ZBUS_SCHEMA:
        raise SchemaError(f"$.schema: expected {ZBUS_SCHEMA!r}, got {doc.get('schema')!r}")

    raw_buses = _want(doc, "buses", "$")
    if not isinstance(raw_buses, list) or not raw_buses:
        raise SchemaError("$.buses: expected a non-empty array")
    buses: list[tuple[str, str]] = []
    phase_set: dict[str, str] = {}
    for i, b in enumerate(raw_buses):
        path = f"$.buses[{i}]"
        if not isinstance(b, dict):
            raise SchemaError(f"{path}: expected an object")
        bus_id = str(_want(b, "id", path))
        phs = _phase_subset(_want(b, "phases", path), f"{path}.phases")
        if bus_id in phase_set:
            raise SchemaError(f"{path}.id: duplicate bus id {bus_id!r}")
        phase_set[bus_id] = phs
        buses.append((bus_id, phs))

    raw_slack = _want(doc, "slack", "$")
    slack_bus = str(_want(raw_slack, "bus", "$.slack"))
    if slack_bus not in phase_set:
        raise SchemaError(f"$.slack.bus: unknown bus {slack_bus!r}")
    raw_v = _want(raw_slack, "voltage", "$.slack")
    if not isinstance(raw_v, dict):
        raise SchemaError("$.slack.voltage: expected an object keyed by phase")
    if set(raw_v) != set(phase_set[slack_bus]):
        raise SchemaError(
            f"$.slack.voltage: phases {sorted(raw_v)} must match slack bus "
            f"phases {sorted(phase_set[slack_bus])}"
        )
    slack_voltage = {
        p: _cplx(v, f"$.slack.voltage.{p}") for p, v in sorted(raw_v.items())
    }

    lines: list[LineBlock] = []
    for i, ln in enumerate(doc.get("lines", [])):
        path = f"$.lines[{i}]"
        if not isinstance(ln, dict):
            raise SchemaError(f"{path}: expected an object")
        fbus = str(_want(ln, "from", path))
        tbus = str(_want(ln, "to", path))
        phs = _phase_subset(_want(ln, "phases", path), f"{path}.phases")
        for end, bus in (("from", fbus), ("to", tbus)):
            if bus not in phase_set:
                raise SchemaError(f"{path}.{end}: unknown bus {bus!r}")
            missing = [p for p in phs if p not in phase_set[bus]]
            if missing:
                raise SchemaError(
                    f"{path}.phases: phase(s) {missing} not present at bus {bus!r}"
                )
        k = len(phs)
        lines.append(
            LineBlock(
                from_bus=fbus,
                to_bus=tbus,
                phases=phs,
                y_ff=_cmat(_want(ln, "y_ff", path), f"{path}.y_ff", k),
                y_ft=_cmat(_want(ln, "y_ft", path), f"{path}.y_ft", k),
                y_tf=_cmat(_want(ln, "y_tf", path), f"{path}.y_tf", k),
                y_tt=_cmat(_want(ln, "y_tt", path), f"{path}.y_tt", k),
            )
        )

    shunts: list[ShuntBlock] = []
    for i, sh in enumerate(doc.get("shunts", [])):
        path = f"$.shunts[{i}]"
        if not isinstance(sh, dict):
            raise SchemaError(f"{path}: expected an object")
        bus = str(_want(sh, "bus", path))
        if bus not in phase_set:
            raise SchemaError(f"{path}.bus: unknown bus {bus!r}")
        phs = _phase_subset(_want(sh, "phases", path), f"{path}.phases")
        missing = [p for p in phs if p not in phase_set[bus]]
        if missing:
            raise SchemaError(f"{path}.phases: phase(s) {missing} not present at bus {bus!r}")
        shunts.append(
            ShuntBlock(bus=bus, phases=phs, y=_cmat(_want(sh, "y", path), f"{path}.y", len(phs)))
        )

    loads: list[LoadSpec] = []
    for i, ld in enumerate(doc.get("loads", [])):
        path = f"$.loads[{i}]"
        if not isinstance(ld, dict):
            raise SchemaError(f"{path}: expected an object")
        kind = _want(ld, "kind", path)
        bus = str(_want(ld, "bus", path))
        if bus not in phase_set:
            raise SchemaError(f"{path}.bus: unknown bus {bus!r}")
        s = _cplx(_want(ld, "s", path), f"{path}.s")
        if kind == "wye":
            ph = _want(ld, "phase", path)
            if not isinstance(ph, str) or ph not in PHASES:
                raise SchemaError(f"{path}.phase: expected one of 'a', 'b', 'c'")
            if ph not in phase_set[bus]:
                raise SchemaError(f"{path}.phase: phase {ph!r} not present at bus {bus!r}")
            phs = ph
        elif kind == "delta":
            phs = _want(ld, "phases", path)
            if not isinstance(phs, str) or len(phs) != 2 or phs[0] == phs[1]:
                raise SchemaError(f"{path}.phases: expected an ordered pair like 'ab'")
            for p in phs:
                if p not in PHASES:
                    raise SchemaError(f"{path}.phases: unknown phase {p!r}")
                if p not in phase_set[bus]:
                    raise SchemaError(f"{path}.phases: phase {p!r} not present at bus {bus!r}")
        else:
            raise SchemaError(f"{path}.kind: expected 'wye' or 'delta', got {kind!r}")
        if bus == slack_bus:
            raise SchemaError(f"{path}.bus: loads on the slack bus are not supported")
        loads.append(LoadSpec(kind=kind, bus=bus, phases=phs, s=s))

    return ThreePhaseNetwork(
        name=str(doc.get("name", "")),
        buses=tuple(buses),
        slack_bus=slack_bus,
        slack_voltage=slack_voltage,
        lines=tuple(lines),
        shunts=tuple(shunts),
        loads=tuple(loads),
    )


def _enc_c(z: complex) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


def _enc_m(m: np.ndarray) -> list[list[list[float]]]:
    return [[_enc_c(m[i, j]) for j in range(m.shape[1])] for i in range(m.shape[0])]


def distribution_to_json(net: ThreePhaseNetwork) -> str:
    """Serialize back to the canonical JSON schema."""
    doc = {
        "schema": ZBUS_SCHEMA,
        "name": net.name,
        "buses": [{"id": b, "phases": p} for b, p in net.buses],
        "slack": {
            "bus": net.slack_bus,
            "voltage": {p: _enc_c(v) for p, v in net.slack_voltage.items()},
        },
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "phases": ln.phases,
                "y_ff": _enc_m(ln.y_ff),
                "y_ft": _enc_m(ln.y_ft),
                "y_tf": _enc_m(ln.y_tf),
                "y_tt": _enc_m(ln.y_tt),
            }
            for ln in net.lines
        ],
        "shunts": [
            {"bus": sh.bus, "phases": sh.phases, "y": _enc_m(sh.y)} for sh in net.shunts
        ],
        "loads": [
            {
                "kind": ld.kind,
                "bus": ld.bus,
                **({"phase": ld.phases} if ld.kind == "wye" else {"phases": ld.phases}),
                "s": _enc_c(ld.s),
            }
            for ld in net.loads
        ],
    }
    return json.dumps(doc, indent=1)


# ---------------------------------------------------------------------------
# Admittance assembly and Z-Bus reduction
# ---------------------------------------------------------------------------


def build_three_phase_ybus(net: ThreePhaseNetwork) -> scipy.sparse.csr_matrix:
    """Assemble the complex node-phase admittance matrix from primitive blocks."""
    idx = net.phase_index()
    n = net.n_phases
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def _add(block: np.ndarray, ridx: np.ndarray, cidx: np.ndarray) -> None:
        rr, cc = np.meshgrid(ridx, cidx, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(block.ravel())

    for ln in net.lines:
        fidx = np.array([idx[(ln.from_bus, p)] for p in ln.phases], dtype=np.int64)
        tidx = np.array([idx[(ln.to_bus, p)] for p in ln.phases], dtype=np.int64)
        _add(ln.y_ff, fidx, fidx)
        _add(ln.y_ft, fidx, tidx)
        _add(ln.y_tf, tidx, fidx)
        _add(ln.y_tt, tidx, tidx)
    for sh in net.shunts:
        sidx = np.array([idx[(sh.bus, p)] for p in sh.phases], dtype=np.int64)
        _add(sh.y, sidx, sidx)

    if rows:
        y = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        ).tocsr()
    else:
        y = scipy.sparse.csr_matrix((n, n), dtype=np.complex128)
    y.sum_duplicates()
    y.eliminate_zeros()
    y.sort_indices()
    return y


@dataclass(frozen=True)
class ZBusModel:
    """Reduced impedance operator plus load incidence, immutable after build.

    ``z_apply`` solves with the dense LU of the non-slack admittance block,
    which is mathematically the reduced bus-impedance matrix without ever
    forming the inverse.
    """

    lu: np.ndarray
    piv: np.ndarray
    v0: np.ndarray
    y_nn: scipy.sparse.csr_matrix
    y_ns: scipy.sparse.csr_matrix
    v_slack: np.ndarray
    non_slack: np.ndarray  # global node-phase indices in reduced order
    node_phase_ids: tuple[str, ...]  # labels for ALL node-phases (global order)
    wye_idx: np.ndarray  # reduced indices, one per wye load
    wye_s: np.ndarray  # base complex powers per wye load
    delta_p: np.ndarray  # reduced indices, first phase of each delta pair
    delta_q: np.ndarray
    delta_s: np.ndarray
    load_kinds: tuple[str, ...]  # original loads order ("wye"/"delta")
    voltage_floor: float = 1e-6

    @property
    def n(self) -> int:
        return self.v0.size

    def z_apply(self, w: np.ndarray) -> np.ndarray:
        """Apply the reduced bus-impedance operator: solve Y_NN x = w."""
        return scipy.linalg.lu_solve((self.lu, self.piv), w, check_finite=False)

    def reduced_ids(self) -> list[str]:
        return [self.node_phase_ids[g] for g in self.non_slack]


def reduce_zbus(
    y: scipy.sparse.csr_matrix,
    slack_phases: np.ndarray,
    v_slack: np.ndarray,
    *,
    node_phase_ids: tuple[str, ...] | None = None,
    loads: tuple[LoadSpec, ...] = (),
    phase_index: dict[tuple[str, str], int] | None = None,
    voltage_floor: float = 1e-6,
) -> ZBusModel:
    """Factorize the non-slack admittance block and precompute v0.

    The factorization happens once; every scenario and iteration reuses it.
    ``loads`` (with ``phase_index``) attaches wye/delta incidence so the
    current-injection map can run vectorized.
    """
    n = y.shape[0]
    slack_phases = np.asarray(slack_phases, dtype=np.int64)
    v_slack = np.asarray(v_slack, dtype=np.complex128)
    if slack_phases.size == 0:
        raise ValueError("at least one slack phase required")
    if slack_phases.size != v_slack.size:
        raise ValueError("slack_phases and v_slack must align")
    mask = np.ones(n, dtype=bool)
    mask[slack_phases] = False
    non_slack = np.flatnonzero(mask)

    y_nn = y[non_slack][:, non_slack].tocsr()
    y_ns = y[non_slack][:, slack_phases].tocsr()
    dense = y_nn.toarray()
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(dense, check_finite=False)
    diag = np.abs(np.diag(lu))
    scale = max(np.abs(dense).max(), np.finfo(np.float64).tiny) if dense.size else 1.0
    if dense.size and (
        not np.all(np.isfinite(lu))
        or diag.min() <= dense.shape[0] * np.finfo(np.float64).eps * scale
    ):
        raise SingularYbusError(
            "non-slack admittance block is numerically singular "
            "(isolated node-phase or zero-admittance island)"
        )
    v0 = scipy.linalg.lu_solve((lu, piv), -(y_ns @ v_slack), check_finite=False)

    if node_phase_ids is None:
        node_phase_ids = tuple(f"node{k}" for k in range(n))
    reduced_pos = {int(g): r for r, g in enumerate(non_slack)}

    wye_idx: list[int] = []
    wye_s: list[complex] = []
    delta_p: list[int] = []
    delta_q: list[int] = []
    delta_s: list[complex] = []
    kinds: list[str] = []
    for ld in loads:
        if phase_index is None:
            raise ValueError("phase_index required when loads are given")
        kinds.append(ld.kind)
        if ld.kind == "wye":
            g = phase_index[(ld.bus, ld.phases)]
            wye_idx.append(reduced_pos[g])
            wye_s.append(ld.s)
        else:
            gp = phase_index[(ld.bus, ld.phases[0])]
            gq = phase_index[(ld.bus, ld.phases[1])]
            delta_p.append(reduced_pos[gp])
            delta_q.append(reduced_pos[gq])
            delta_s.append(ld.s)

    return ZBusModel(
        lu=lu,
        piv=piv,
        v0=v0,
        y_nn=y_nn,
        y_ns=y_ns,
        v_slack=v_slack,
        non_slack=non_slack,
        node_phase_ids=tuple(node_phase_ids),
        wye_idx=np.asarray(wye_idx, dtype=np.int64),
        wye_s=np.asarray(wye_s, dtype=np.complex128),
        delta_p=np.asarray(delta_p, dtype=np.int64),
        delta_q=np.asarray(delta_q, dtype=np.int64),
        delta_s=np.asarray(delta_s, dtype=np.complex128),
        load_kinds=tuple(kinds),
        voltage_floor=voltage_floor,
    )


def build_zbus_model(net: ThreePhaseNetwork, voltage_floor: float = 1e-6) -> ZBusModel:
    """One-call model construction from a parsed network."""
    y = build_three_phase_ybus(net)
    return reduce_zbus(
        y,
        net.slack_phase_indices(),
        net.slack_voltages(),
        node_phase_ids=tuple(net.node_phase_ids()),
        loads=net.loads,
        phase_index=net.phase_index(),
        voltage_floor=voltage_floor,
    )


# ---------------------------------------------------------------------------
# Scenarios and the fixed-point iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistributionScenario:
    """Complex powers aligned with the model's wye and delta load orders."""

    wye_s: np.ndarray
    delta_s: np.ndarray


def base_distribution_scenario(model: ZBusModel) -> DistributionScenario:
    return DistributionScenario(wye_s=model.wye_s.copy(), delta_s=model.delta_s.copy())


@dataclass
class FixedPointOptions:
    tol: float = 1e-9
    max_iter: int = 100

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class FixedPointResult:
    v: np.ndarray
    converged: bool
    iterations: int
    final_delta: float
    residual_inf: float
    diagnostic: str | None = None


def current_injection(
    v: np.ndarray, scenario: DistributionScenario, model: ZBusModel
) -> np.ndarray:
    """Load currents injected at the non-slack phases for iterate v.

    Accumulation order is fixed (wye loads first, then delta loads, each in
    model order) so repeated evaluation is bitwise reproducible.
    """
    i = np.zeros(model.n, dtype=np.complex128)
    floor = model.voltage_floor
    if model.wye_idx.size:
        vp = v[model.wye_idx]
        bad = np.abs(vp) <= floor
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            label = model.reduced_ids()[int(model.wye_idx[k])]
            raise VoltageFloorError(label, float(np.abs(vp[k])))
        np.add.at(i, model.wye_idx, -np.conj(scenario.wye_s / vp))
    if model.delta_p.size:
        vp = v[model.delta_p]
        vq = v[model.delta_q]
        for arr, idx in ((vp, model.delta_p), (vq, model.delta_q)):
            bad = np.abs(arr) <= floor
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                label = model.reduced_ids()[int(idx[k])]
                raise VoltageFloorError(label, float(np.abs(arr[k])))
        dv = vp - vq
        bad = np.abs(dv) <= floor
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            ids = model.reduced_ids()
            label = f"{ids[int(model.delta_p[k])]}-{ids[int(model.delta_q[k])]}"
            raise VoltageFloorError(label, float(np.abs(dv[k])))
        i_line = np.conj(scenario.delta_s / dv)
        np.add.at(i, model.delta_p, -i_line)
        np.add.at(i, model.delta_q, i_line)
    return i


def fixed_point_residual(
    model: ZBusModel, scenario: DistributionScenario, v: np.ndarray
) -> float:
    """Independent certificate ||v - (Z i(v) + v0)||_inf."""
    try:
        i = current_injection(v, scenario, model)
    except VoltageFloorError:
        return float("inf")
    return float(np.abs(v - (model.z_apply(i) + model.v0)).max())


def kirchhoff_residual(
    model: ZBusModel, scenario: DistributionScenario, v: np.ndarray
) -> float:
    """Max |Y_NN v + Y_NS v_slack - i_loads(v)| over non-slack phases."""
    i_net = model.y_nn @ v + model.y_ns @ model.v_slack
    i_loads = current_injection(v, scenario, model)
    return float(np.abs(i_net - i_loads).max()) if v.size else 0.0


def zbus_iterate(
    model: ZBusModel,
    scenario: DistributionScenario | None = None,
    opts: FixedPointOptions | None = None,
) -> FixedPointResult:
    """Run the fixed point v <- Z i(v) + v0 from the no-load start v = v0.

    Stops when the change in the sum of voltage magnitudes drops to ``tol``
    or after ``max_iter`` sweeps. A voltage-floor violation mid-iteration
    returns a diverged result with the offending node-phase in the
    diagnostic instead of raising. BLAS threads are pinned to one for
    bitwise reproducibility.
    """
    if scenario is None:
        scenario = base_distribution_scenario(model)
    opts = opts or FixedPointOptions()
    with single_thread_blas():
        return _zbus_loop(model, scenario, opts)


def _zbus_loop(
    model: ZBusModel, scenario: DistributionScenario, opts: FixedPointOptions
) -> FixedPointResult:
    v = model.v0.copy()
    mag_sum = float(np.abs(v).sum())
    converged = False
    delta = float("inf")
    k = 0
    for k in range(1, opts.max_iter + 1):
        try:
            i = current_injection(v, scenario, model)
        except VoltageFloorError as exc:
            return FixedPointResult(
                v=v,
                converged=False,
                iterations=k,
                final_delta=delta,
                residual_inf=float("inf"),
                diagnostic=str(exc),
            )
        v = model.z_apply(i) + model.v0
        new_sum = float(np.abs(v).sum())
        delta = abs(new_sum - mag_sum)
        mag_sum = new_sum
        if delta <= opts.tol:
            converged = True
            break
    residual = fixed_point_residual(model, scenario, v)
    return FixedPointResult(
        v=v,
        converged=converged,
        iterations=k,
        final_delta=delta,
        residual_inf=residual,
    )


def batch_zbus_solve(
    model: ZBusModel,
    scenarios: list[DistributionScenario],
    parallelism: int = 1,
    opts: FixedPointOptions | None = None,
) -> list[FixedPointResult]:
    """Solve a scenario batch; output order matches input order.

    Worker count never changes the numbers: each scenario is an independent
    deterministic solve, so the batch result equals a sequential loop
    element-wise, bitwise. Unexpected per-scenario errors are isolated into
    failed records rather than poisoning the batch.
    """
    opts = opts or FixedPointOptions()
    if parallelism <= 1 or len(scenarios) <= 1:
        return [_safe_zbus(model, sc, opts) for sc in scenarios]

    from .batch import _fork_map  # local import to avoid a cycle

    return _fork_map(
        _safe_zbus, [(model, sc, opts) for sc in scenarios], parallelism
    )


def _safe_zbus(
    model: ZBusModel, scenario: DistributionScenario, opts: FixedPointOptions
) -> FixedPointResult:
    try:
        return zbus_iterate(model, scenario, opts)
    except Exception as exc:  # isolate scenario failures
        return FixedPointResult(
            v=np.full(model.n, np.nan, dtype=np.complex128),
            converged=False,
            iterations=0,
            final_delta=float("inf"),
            residual_inf=float("inf"),
            diagnostic=f"{type(exc).__name__}: {exc}",
        )


# ---------------------------------------------------------------------------
# Reference voltage fixtures
# ---------------------------------------------------------------------------


def read_reference_voltages(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a reference CSV with columns: node_phase, vmag_pu, angle_deg."""
    ids: list[str] = []
    mags: list[float] = []
    angs: list[float] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if [h.strip() for h in header[:3]] != ["node_phase", "vmag_pu", "angle_deg"]:
            raise ValueError(
                f"{path}: expected header 'node_phase,vmag_pu,angle_deg', got {header!r}"
            )
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            try:
                mags.append(float(parts[1]))
                angs.append(float(parts[2]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad number ({exc})") from exc
            ids.append(parts[0].strip())
    return ids, np.asarray(mags), np.asarray(angs)
