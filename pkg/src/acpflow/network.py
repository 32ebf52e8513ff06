"""Transmission network model: MATPOWER-subset parsing and Y-bus assembly.

The parser accepts the bus/gen/branch/baseMVA subset of the MATPOWER case
format. All quantities are converted to per-unit on the system base at parse
time and the resulting objects are immutable afterwards, so networks can be
shared read-only across solver workers.
"""

from __future__ import annotations

import cmath
import enum
import json
import logging
import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .sparse import SparseCoo, SparseCsr

TXNET_SCHEMA = "acpflow-txnet/1"

logger = logging.getLogger(__name__)


class CaseParseError(ValueError):
    """Malformed or inconsistent case input; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class BusRecord:
    """One bus with per-unit setpoints, net injections, and shunts.

    Loads and generation are kept separately so scenario perturbation can
    scale loads without touching generator setpoints; ``p_inj``/``q_inj``
    give the base net injections (generation minus load).
    """

    id: int
    kind: BusKind
    v_set: float
    theta_set: float
    p_load: float
    q_load: float
    p_gen: float
    q_gen: float
    gs: float
    bs: float

    @property
    def p_inj(self) -> float:
        return self.p_gen - self.p_load

    @property
    def q_inj(self) -> float:
        return self.q_gen - self.q_load


@dataclass(frozen=True)
class BranchRecord:
    """Pi-model branch in per-unit; ``tap`` is off-nominal ratio, ``shift`` radians."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_ch: float
    tap: float = 1.0
    shift: float = 0.0
    status: int = 1


@dataclass(frozen=True)
class TransmissionNetwork:
    """Parsed transmission case: buses in file order plus branch list."""

    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    base_mva: float
    name: str = ""
    notes: tuple[str, ...] = ()
    ignored_fields: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}


class AdmittanceMatrix:
    """Complex bus admittance split into real (g) and imaginary (b) sparse parts."""

    __slots__ = ("g", "b", "n", "_yc")

    def __init__(self, g: SparseCoo, b: SparseCoo, n: int):
        if g.shape != (n, n) or b.shape != (n, n):
            raise ValueError("g and b must both be n x n")
        self.g = g
        self.b = b
        self.n = n
        self._yc = None

    def complex_csr(self) -> scipy.sparse.csr_matrix:
        """Cached complex CSR view g + j*b used by the injection kernels."""
        if self._yc is None:
            gm = scipy.sparse.coo_matrix(
                (self.g.vals, (self.g.rows, self.g.cols)), shape=(self.n, self.n)
            )
            bm = scipy.sparse.coo_matrix(
                (self.b.vals, (self.b.rows, self.b.cols)), shape=(self.n, self.n)
            )
            yc = (gm + 1j * bm).tocsr()
            yc.sum_duplicates()
            yc.sort_indices()
            self._yc = yc
        return self._yc

    def to_dense(self) -> np.ndarray:
        return self.g.to_dense() + 1j * self.b.to_dense()


@dataclass(frozen=True)
class BusPartition:
    """Index bookkeeping for the free-variable blocks.

    ``theta_block`` orders PV buses before PQ buses; ``q_block`` is the PQ
    buses in the same relative order. Positions map a bus index to its offset
    inside each block.
    """

    slack: tuple[int, ...]
    pv: tuple[int, ...]
    pq: tuple[int, ...]
    theta_block: np.ndarray
    q_block: np.ndarray
    theta_pos: dict[int, int]
    q_pos: dict[int, int]

    @property
    def n_theta(self) -> int:
        return self.theta_block.size

    @property
    def n_q(self) -> int:
        return self.q_block.size


@dataclass(frozen=True)
class PartitionedYViews:
    """Negated Y-bus sub-blocks used by the fast-decoupled preconditioner."""

    b_prime: SparseCsr
    b_dprime: SparseCsr
    g_qtheta: SparseCsr


# ---------------------------------------------------------------------------
# MATPOWER-subset parsing
# ---------------------------------------------------------------------------

_BUS_COLS = 9  # BUS_I TYPE PD QD GS BS AREA VM VA [BASE_KV ZONE VMAX VMIN]
_GEN_COLS = 8  # BUS PG QG QMAX QMIN VG MBASE STATUS [...]
_BRANCH_COLS = 11  # F T R X B RATEA RATEB RATEC TAP SHIFT STATUS [...]

_ASSIGN_RE = re.compile(r"^mpc\.(\w+)\s*=\s*(.*)$")
_FUNCTION_RE = re.compile(r"^function\s+\w+\s*=\s*(\w+)")


def _parse_row(chunk: str, lineno: int) -> list[float]:
    values = []
    for tok in chunk.replace(",", " ").split():
        try:
            values.append(float(tok))
        except ValueError:
            raise CaseParseError(f"malformed matrix row: bad token {tok!r}", lineno)
    return values


def _scan_case_text(text: str):
    """Split case text into scalar assignments and matrices with line numbers."""
    scalars: dict[str, tuple[float, int]] = {}
    matrices: dict[str, list[tuple[int, list[float]]]] = {}
    strings: dict[str, str] = {}
    name = ""
    current: str | None = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is not None:
            body, closed, _ = line.partition("]")
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if chunk:
                    matrices[current].append((lineno, _parse_row(chunk, lineno)))
            if closed:
                current = None
            continue
        m = _FUNCTION_RE.match(line)
        if m:
            name = m.group(1)
            continue
        m = _ASSIGN_RE.match(line)
        if not m:
            continue
        field_name, rest = m.group(1), m.group(2).strip()
        if rest.startswith("["):
            matrices[field_name] = []
            current = field_name
            body, closed, _ = rest[1:].partition("]")
            for chunk in body.split(";"):
                chunk = chunk.strip()
                if chunk:
                    matrices[field_name].append((lineno, _parse_row(chunk, lineno)))
            if closed:
                current = None
        elif rest.startswith("'") or rest.startswith('"'):
            strings[field_name] = rest.strip("'\";")
        else:
            try:
                scalars[field_name] = (float(rest.rstrip(";")), lineno)
            except ValueError:
                raise CaseParseError(
                    f"malformed scalar assignment for mpc.{field_name}", lineno
                )
    if current is not None:
        raise CaseParseError(f"matrix mpc.{current} never closed with ']'")
    return name, scalars, matrices, strings


def parse_matpower_case(text: str) -> TransmissionNetwork:
    """Parse the bus/gen/branch/baseMVA subset of a MATPOWER case file.

    Bus kinds come from the bus-type column, cross-checked against generator
    presence (a PV bus with no in-service generator is demoted to PQ with a
    note). Multiple generators on one bus have their injections summed; their
    voltage setpoints must agree. Buses not connected to the slack bus through
    in-service branches are rejected.
    """
    name, scalars, matrices, _strings = _scan_case_text(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing mpc.baseMVA")
    base_mva = scalars["baseMVA"][0]
    if base_mva <= 0:
        raise CaseParseError("baseMVA must be positive", scalars["baseMVA"][1])
    for required in ("bus", "gen", "branch"):
        if required not in matrices:
            raise CaseParseError(f"missing mpc.{required} matrix")

    notes: list[str] = []

    # --- buses ---
    bus_rows = matrices["bus"]
    ids_seen: dict[int, int] = {}
    raw_buses: list[dict] = []
    for lineno, row in bus_rows:
        if len(row) < _BUS_COLS:
            raise CaseParseError(
                f"bus row needs >= {_BUS_COLS} columns, got {len(row)}", lineno
            )
        bus_id = int(row[0])
        if bus_id in ids_seen:
            raise CaseParseError(f"duplicate bus id {bus_id}", lineno)
        ids_seen[bus_id] = len(raw_buses)
        bus_type = int(row[1])
        if bus_type not in (1, 2, 3, 4):
            raise CaseParseError(f"unknown bus type {bus_type} for bus {bus_id}", lineno)
        raw_buses.append(
            {
                "id": bus_id,
                "type": bus_type,
                "pd": row[2] / base_mva,
                "qd": row[3] / base_mva,
                "gs": row[4] / base_mva,
                "bs": row[5] / base_mva,
                "vm": row[7],
                "va": np.deg2rad(row[8]),
                "line": lineno,
            }
        )

    # --- generators ---
    gen_at: dict[int, list[tuple[int, list[float]]]] = {}
    for lineno, row in matrices["gen"]:
        if len(row) < _GEN_COLS:
            raise CaseParseError(
                f"gen row needs >= {_GEN_COLS} columns, got {len(row)}", lineno
            )
        gbus = int(row[0])
        if gbus not in ids_seen:
            raise CaseParseError(f"generator references unknown bus {gbus}", lineno)
        gen_at.setdefault(gbus, []).append((lineno, row))

    # --- branches ---
    branches: list[BranchRecord] = []
    for lineno, row in matrices["branch"]:
        if len(row) < _BRANCH_COLS:
            raise CaseParseError(
                f"branch row needs >= {_BRANCH_COLS} columns, got {len(row)}", lineno
            )
        fbus, tbus = int(row[0]), int(row[1])
        for end in (fbus, tbus):
            if end not in ids_seen:
                raise CaseParseError(f"branch references unknown bus {end}", lineno)
        tap = row[8]
        if tap == 0.0:
            tap = 1.0
        if tap < 0:
            raise CaseParseError(f"branch {fbus}-{tbus} has tap <= 0", lineno)
        branches.append(
            BranchRecord(
                from_bus=fbus,
                to_bus=tbus,
                r=row[2],
                x=row[3],
                b_ch=row[4],
                tap=tap,
                shift=np.deg2rad(row[9]),
                status=int(row[10]),
            )
        )

    # --- combine into BusRecords ---
    buses: list[BusRecord] = []
    slack_count = 0
    for raw in raw_buses:
        bus_id = raw["id"]
        in_service = [row for _, row in gen_at.get(bus_id, []) if int(row[7]) > 0]
        p_gen = sum(r[1] for r in in_service) / base_mva
        q_gen = sum(r[2] for r in in_service) / base_mva
        v_set = raw["vm"]
        if in_service:
            vgs = [r[5] for r in in_service]
            if max(vgs) - min(vgs) > 1e-9:
                raise CaseParseError(
                    f"conflicting generator voltage setpoints at bus {bus_id}: {vgs}",
                    raw["line"],
                )
            v_set = vgs[0]

        bus_type = raw["type"]
        if bus_type == 4:
            raise CaseParseError(
                f"bus {bus_id} is marked isolated (type 4); "
                "only the slack island is supported",
                raw["line"],
            )
        if bus_type == 3:
            kind = BusKind.SLACK
            slack_count += 1
            if not in_service:
                raise CaseParseError(
                    f"slack bus {bus_id} has no in-service generator", raw["line"]
                )
        elif bus_type == 2:
            if in_service:
                kind = BusKind.PV
            else:
                kind = BusKind.PQ
                note = f"bus {bus_id}: PV without in-service generator, demoted to PQ"
                logger.warning(note)
                notes.append(note)
        else:
            kind = BusKind.PQ

        if kind in (BusKind.SLACK, BusKind.PV) and v_set <= 0:
            raise CaseParseError(f"bus {bus_id} needs v_set > 0", raw["line"])
        buses.append(
            BusRecord(
                id=bus_id,
                kind=kind,
                v_set=v_set,
                theta_set=raw["va"],
                p_load=raw["pd"],
                q_load=raw["qd"],
                p_gen=p_gen,
                q_gen=q_gen,
                gs=raw["gs"],
                bs=raw["bs"],
            )
        )

    if slack_count == 0:
        raise CaseParseError("no slack bus (type 3) in case")
    if slack_count > 1:
        raise CaseParseError(f"{slack_count} slack buses; exactly one supported")

    net = TransmissionNetwork(
        buses=tuple(buses),
        branches=tuple(branches),
        base_mva=base_mva,
        name=name,
        notes=tuple(notes),
        ignored_fields=tuple(
            sorted(set(matrices) - {"bus", "gen", "branch"})
        ),
    )
    _check_single_island(net)
    return net


def _check_single_island(net: TransmissionNetwork) -> None:
    index = net.bus_index()
    adj: list[list[int]] = [[] for _ in range(net.n)]
    for br in net.branches:
        if br.status:
            i, j = index[br.from_bus], index[br.to_bus]
            adj[i].append(j)
            adj[j].append(i)
    slack = next(i for i, b in enumerate(net.buses) if b.kind is BusKind.SLACK)
    seen = np.zeros(net.n, dtype=bool)
    stack = [slack]
    seen[slack] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    if not seen.all():
        missing = [net.buses[i].id for i in np.flatnonzero(~seen)]
        raise CaseParseError(
            f"buses not connected to the slack island: {missing[:10]}"
            + ("..." if len(missing) > 10 else "")
        )


# ---------------------------------------------------------------------------
# Y-bus assembly and partitioning
# ---------------------------------------------------------------------------


def build_ybus(net: TransmissionNetwork) -> AdmittanceMatrix:
    """Assemble the per-unit bus admittance matrix from the pi-model branches.

    For a branch with series admittance y = 1/(r + jx), charging b_ch, tap t
    and shift d: the from-side diagonal gets (y + j b_ch/2)/t^2, the to-side
    diagonal gets y + j b_ch/2, and the off-diagonals get -y/(t e^{-jd}) and
    -y/(t e^{+jd}). Bus shunts gs + j bs add to the diagonal.
    """
    index = net.bus_index()
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []
    for br in net.branches:
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise CaseParseError(
                f"in-service branch {br.from_bus}-{br.to_bus} has r = x = 0"
            )
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_ch
        tap = br.tap * cmath.exp(1j * br.shift)
        f, t = index[br.from_bus], index[br.to_bus]
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [
            (ys + ysh) / (br.tap * br.tap),
            ys + ysh,
            -ys / tap.conjugate(),
            -ys / tap,
        ]
    for i, bus in enumerate(net.buses):
        if bus.gs or bus.bs:
            rows.append(i)
            cols.append(i)
            vals.append(complex(bus.gs, bus.bs))

    yc = scipy.sparse.coo_matrix(
        (np.asarray(vals, dtype=np.complex128), (rows, cols)), shape=(net.n, net.n)
    ).tocsr()
    yc.sum_duplicates()
    yo = yc.tocoo()
    re_mask = yo.data.real != 0.0
    im_mask = yo.data.imag != 0.0
    g = SparseCoo(yo.row[re_mask], yo.col[re_mask], yo.data.real[re_mask], (net.n, net.n))
    b = SparseCoo(yo.row[im_mask], yo.col[im_mask], yo.data.imag[im_mask], (net.n, net.n))
    return AdmittanceMatrix(g=g, b=b, n=net.n)


def partition_buses(net: TransmissionNetwork) -> BusPartition:
    """Split bus indices into slack/PV/PQ and build the free-variable blocks."""
    slack = tuple(i for i, b in enumerate(net.buses) if b.kind is BusKind.SLACK)
    pv = tuple(i for i, b in enumerate(net.buses) if b.kind is BusKind.PV)
    pq = tuple(i for i, b in enumerate(net.buses) if b.kind is BusKind.PQ)
    if len(slack) != 1:
        raise ValueError(f"exactly one slack bus required, found {len(slack)}")
    theta_block = np.asarray(pv + pq, dtype=np.int64)
    q_block = np.asarray(pq, dtype=np.int64)
    return BusPartition(
        slack=slack,
        pv=pv,
        pq=pq,
        theta_block=theta_block,
        q_block=q_block,
        theta_pos={int(b): k for k, b in enumerate(theta_block)},
        q_pos={int(b): k for k, b in enumerate(q_block)},
    )


def extract_partitioned_views(
    y: AdmittanceMatrix, part: BusPartition
) -> PartitionedYViews:
    """Slice out B' = -Im(Y) over theta x theta, B'' = -Im(Y) over q x q,
    and the coupling block G = -Re(Y) over q x theta."""
    n = y.n
    for blk in (part.theta_block, part.q_block):
        if blk.size and (blk.min() < 0 or blk.max() >= n):
            raise IndexError("partition index out of range for admittance matrix")
    yc = y.complex_csr()
    sub_tt = yc[part.theta_block][:, part.theta_block]
    sub_qq = yc[part.q_block][:, part.q_block]
    sub_qt = yc[part.q_block][:, part.theta_block]

    def _neg_part(mat, take_imag: bool) -> SparseCsr:
        arr = -(mat.imag if take_imag else mat.real)
        arr = scipy.sparse.csr_matrix(arr)
        arr.eliminate_zeros()
        return SparseCsr._from_scipy(arr)

    return PartitionedYViews(
        b_prime=_neg_part(sub_tt, True),
        b_dprime=_neg_part(sub_qq, True),
        g_qtheta=_neg_part(sub_qt, False),
    )


# ---------------------------------------------------------------------------
# Canonical JSON serialization
# ---------------------------------------------------------------------------


def network_to_json(net: TransmissionNetwork) -> str:
    """Serialize to the canonical JSON schema (lossless for supported fields)."""
    doc = {
        "schema": TXNET_SCHEMA,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind.value,
                "v_set": b.v_set,
                "theta_set": b.theta_set,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "p_gen": b.p_gen,
                "q_gen": b.q_gen,
                "gs": b.gs,
                "bs": b.bs,
            }
            for b in net.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b_ch": br.b_ch,
                "tap": br.tap,
                "shift": br.shift,
                "status": br.status,
            }
            for br in net.branches
        ],
    }
    return json.dumps(doc, indent=1)


def network_from_json(text: str) -> TransmissionNetwork:
    """Parse the canonical JSON schema produced by :func:`network_to_json`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != TXNET_SCHEMA:
        raise CaseParseError(
            f"$.schema: expected {TXNET_SCHEMA!r}, got {doc.get('schema')!r}"
            if isinstance(doc, dict)
            else "$: expected an object"
        )
    try:
        buses = tuple(
            BusRecord(
                id=int(b["id"]),
                kind=BusKind(b["kind"]),
                v_set=float(b["v_set"]),
                theta_set=float(b["theta_set"]),
                p_load=float(b["p_load"]),
                q_load=float(b["q_load"]),
                p_gen=float(b["p_gen"]),
                q_gen=float(b["q_gen"]),
                gs=float(b["gs"]),
                bs=float(b["bs"]),
            )
            for b in doc["buses"]
        )
        branches = tuple(
            BranchRecord(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                r=float(br["r"]),
                x=float(br["x"]),
                b_ch=float(br["b_ch"]),
                tap=float(br["tap"]),
                shift=float(br["shift"]),
                status=int(br["status"]),
            )
            for br in doc["branches"]
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise CaseParseError(f"invalid network JSON: {exc!r}") from exc
    net = TransmissionNetwork(
        buses=buses,
        branches=branches,
        base_mva=float(doc["base_mva"]),
        name=str(doc.get("name", "")),
    )
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise CaseParseError("duplicate bus ids in JSON network")
    n_slack = sum(1 for b in buses if b.kind is BusKind.SLACK)
    if n_slack != 1:
        raise CaseParseError(f"exactly one slack bus required, found {n_slack}")
    _check_single_island(net)
    return net
