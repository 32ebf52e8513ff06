"""Polar-form Newton-Raphson power flow, matrix-free, with a block
lower-triangular fast-decoupled left preconditioner for GMRES.

The Jacobian is never assembled in the main solver: the correction step is
computed by left-preconditioned GMRES using an analytic Jacobian-vector
product. Writing u_i = V_i e^{j theta_i} and I = Y u, the injections are
S = u * conj(I); the directional derivative along (dtheta, dV) is

    du = e^{j theta} dV + j u dtheta
    dS = du * conj(I) + u * conj(Y du)

which is the exact action of the standard polar Jacobian blocks
(dP/dtheta, dP/dV, dQ/dtheta, dQ/dV) without forming them. The dense
verification oracle assembles those blocks explicitly and factorizes them
with LU each iteration.

The preconditioner approximates the Jacobian by

    [[diag(V_theta) B', 0], [G_qt, diag(V_q) B'']]

with B' and B'' the negated imaginary-part sub-blocks of the admittance
matrix and G_qt the negated real-part coupling block; applying its inverse
is one forward block substitution (two factor solves plus one SpMV). B'
and B'' are regularized with a small diagonal eps and factorized once per
network; only the voltage scalings change between Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from ._threads import single_thread_blas

from .network import (
    AdmittanceMatrix,
    BusKind,
    BusPartition,
    PartitionedYViews,
    TransmissionNetwork,
    build_ybus,
    extract_partitioned_views,
    partition_buses,
)
from .sparse import (
    BlockFactor,
    GmresOptions,
    SparseCsr,
    factorize_regularized,
    gmres,
    spmv,
)


class SingularJacobianError(np.linalg.LinAlgError):
    """Dense oracle hit a numerically singular Jacobian."""


@dataclass(frozen=True)
class PolarState:
    """Voltage angles and magnitudes over all buses.

    Slack angle and slack/PV magnitudes stay fixed; the free variables are
    the packed vector x = [theta over the angle block; V over the PQ block].
    """

    theta: np.ndarray
    vmag: np.ndarray

    def pack(self, part: BusPartition) -> np.ndarray:
        return np.concatenate([self.theta[part.theta_block], self.vmag[part.q_block]])

    def with_packed(self, x: np.ndarray, part: BusPartition) -> "PolarState":
        theta = self.theta.copy()
        vmag = self.vmag.copy()
        theta[part.theta_block] = x[: part.n_theta]
        vmag[part.q_block] = x[part.n_theta :]
        return PolarState(theta=theta, vmag=vmag)


@dataclass(frozen=True)
class TransmissionScenario:
    """Specified per-unit injections over the free blocks (generation positive)."""

    p_spec: np.ndarray
    q_spec: np.ndarray


@dataclass(frozen=True)
class FdPreconditioner:
    """Fast-decoupled block preconditioner at one voltage iterate."""

    fac_bprime: BlockFactor
    fac_bdprime: BlockFactor
    g_qtheta: SparseCsr
    v_theta: np.ndarray
    v_q: np.ndarray


@dataclass
class NewtonOptions:
    """Solver controls; defaults follow the library's documented conventions."""

    tol_mismatch: float = 1e-8
    max_newton: int = 20
    epsilon: float = 1e-6
    gmres: GmresOptions = field(default_factory=GmresOptions)
    flat_start: bool = True
    precond: str = "fd"  # "fd" or "none"

    def __post_init__(self):
        if not self.tol_mismatch > 0:
            raise ValueError("tol_mismatch must be positive")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")
        if self.precond not in ("fd", "none"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


@dataclass(frozen=True)
class NewtonResult:
    state: PolarState
    converged: bool
    iterations: int
    final_mismatch_inf: float
    per_iteration_gmres: tuple[int, ...]
    diagnostic: str | None = None

    @property
    def total_gmres_iterations(self) -> int:
        return sum(self.per_iteration_gmres)


@dataclass(frozen=True)
class TransmissionModel:
    """Immutable per-network artifacts shared by every scenario solve."""

    net: TransmissionNetwork
    y: AdmittanceMatrix
    part: BusPartition
    views: PartitionedYViews
    epsilon: float
    fd_factors: tuple[BlockFactor, BlockFactor]


def build_transmission_model(
    net: TransmissionNetwork, epsilon: float = 1e-6
) -> TransmissionModel:
    """Parse-once precomputation: Y-bus, partition, views, B'/B'' factors."""
    y = build_ybus(net)
    part = partition_buses(net)
    views = extract_partitioned_views(y, part)
    return TransmissionModel(
        net=net,
        y=y,
        part=part,
        views=views,
        epsilon=epsilon,
        fd_factors=precompute_fd_factors(views, epsilon),
    )


def _as_model(net_or_model, epsilon: float) -> TransmissionModel:
    if isinstance(net_or_model, TransmissionModel):
        return net_or_model
    return build_transmission_model(net_or_model, epsilon)


def flat_start(net: TransmissionNetwork, part: BusPartition) -> PolarState:
    """Slack-aligned angles everywhere; setpoint magnitudes at slack/PV, 1.0 at PQ."""
    slack = net.buses[part.slack[0]]
    theta = np.full(net.n, slack.theta_set)
    vmag = np.ones(net.n)
    for i, bus in enumerate(net.buses):
        if bus.kind in (BusKind.SLACK, BusKind.PV):
            vmag[i] = bus.v_set
    return PolarState(theta=theta, vmag=vmag)


def base_scenario(net: TransmissionNetwork, part: BusPartition) -> TransmissionScenario:
    """Specified injections straight from the case data."""
    p_inj = np.array([b.p_inj for b in net.buses])
    q_inj = np.array([b.q_inj for b in net.buses])
    return TransmissionScenario(
        p_spec=p_inj[part.theta_block], q_spec=q_inj[part.q_block]
    )


# ---------------------------------------------------------------------------
# Mismatch map and its directional derivative
# ---------------------------------------------------------------------------


def calc_injections(state: PolarState, y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit P and Q injections at every bus for the given state."""
    u = state.vmag * np.exp(1j * state.theta)
    i_inj = y.complex_csr() @ u
    s = u * np.conj(i_inj)
    return s.real, s.imag


def mismatch(
    state: PolarState,
    scenario: TransmissionScenario,
    y: AdmittanceMatrix,
    part: BusPartition,
) -> np.ndarray:
    """F = [P_calc - P_spec over the angle block; Q_calc - Q_spec over PQ]."""
    p_calc, q_calc = calc_injections(state, y)
    return np.concatenate(
        [
            p_calc[part.theta_block] - scenario.p_spec,
            q_calc[part.q_block] - scenario.q_spec,
        ]
    )


def _jvp_operator(state: PolarState, y: AdmittanceMatrix, part: BusPartition):
    """Closure evaluating dF = J(x) dx with u and I precomputed at the state."""
    yc = y.complex_csr()
    phase = np.exp(1j * state.theta)
    u = state.vmag * phase
    i_inj = yc @ u
    i_conj = np.conj(i_inj)
    nt = part.n_theta

    def apply(dx: np.ndarray) -> np.ndarray:
        dtheta = np.zeros(y.n)
        dvm = np.zeros(y.n)
        dtheta[part.theta_block] = dx[:nt]
        dvm[part.q_block] = dx[nt:]
        du = phase * dvm + 1j * u * dtheta
        ds = du * i_conj + u * np.conj(yc @ du)
        return np.concatenate([ds.real[part.theta_block], ds.imag[part.q_block]])

    return apply


def jacobian_vector_product(
    state: PolarState,
    y: AdmittanceMatrix,
    part: BusPartition,
    dx: np.ndarray,
) -> np.ndarray:
    """Directional derivative of the mismatch map along a packed direction."""
    dx = np.asarray(dx, dtype=np.float64)
    if dx.size != part.n_theta + part.n_q:
        raise ValueError(
            f"direction has size {dx.size}, expected {part.n_theta + part.n_q}"
        )
    return _jvp_operator(state, y, part)(dx)


# ---------------------------------------------------------------------------
# Fast-decoupled preconditioner
# ---------------------------------------------------------------------------


def precompute_fd_factors(
    views: PartitionedYViews, epsilon: float
) -> tuple[BlockFactor, BlockFactor]:
    """Factorize B' + eps*I and B'' + eps*I once per network."""
    return (
        factorize_regularized(views.b_prime, epsilon),
        factorize_regularized(views.b_dprime, epsilon),
    )


def build_preconditioner(
    views: PartitionedYViews,
    state: PolarState,
    part: BusPartition,
    epsilon: float,
    factors: tuple[BlockFactor, BlockFactor] | None = None,
) -> FdPreconditioner:
    """Refresh the per-iteration voltage scalings around the fixed factors."""
    v_theta = state.vmag[part.theta_block]
    v_q = state.vmag[part.q_block]
    if v_theta.size and v_theta.min() <= 0 or v_q.size and v_q.min() <= 0:
        raise ValueError("voltage magnitudes must be strictly positive")
    if factors is None:
        factors = precompute_fd_factors(views, epsilon)
    return FdPreconditioner(
        fac_bprime=factors[0],
        fac_bdprime=factors[1],
        g_qtheta=views.g_qtheta,
        v_theta=v_theta,
        v_q=v_q,
    )


def apply_preconditioner(p: FdPreconditioner, r: np.ndarray) -> np.ndarray:
    """Forward block substitution: two factor solves and one SpMV."""
    nt = p.v_theta.size
    z_theta = p.fac_bprime.apply(r[:nt] / p.v_theta)
    rhs_q = (r[nt:] - spmv(p.g_qtheta, z_theta)) / p.v_q
    z_q = p.fac_bdprime.apply(rhs_q)
    return np.concatenate([z_theta, z_q])


# ---------------------------------------------------------------------------
# Newton solves
# ---------------------------------------------------------------------------


def newton_solve(
    net_or_model: TransmissionNetwork | TransmissionModel,
    scenario: TransmissionScenario | None = None,
    opts: NewtonOptions | None = None,
    start: PolarState | None = None,
) -> NewtonResult:
    """Matrix-free Newton-Raphson from a flat start.

    Each correction solves J dx = -F by left-preconditioned GMRES. Never
    raises on non-convergence: the result carries converged=False plus a
    diagnostic (GMRES breakdowns included). BLAS threading is pinned to one
    thread for the duration so results are reproducible bit-for-bit
    regardless of the host's thread configuration.
    """
    opts = opts or NewtonOptions()
    model = _as_model(net_or_model, opts.epsilon)
    if scenario is None:
        scenario = base_scenario(model.net, model.part)
    if start is None:
        if not opts.flat_start:
            raise ValueError("flat_start=False requires an explicit start state")
        start = flat_start(model.net, model.part)

    with single_thread_blas():
        return _newton_loop(model, scenario, opts, start)


def _newton_loop(
    model: TransmissionModel,
    scenario: TransmissionScenario,
    opts: NewtonOptions,
    state: PolarState,
) -> NewtonResult:
    factors = (
        model.fd_factors
        if opts.epsilon == model.epsilon
        else precompute_fd_factors(model.views, opts.epsilon)
    )
    gmres_counts: list[int] = []
    diagnostic = None

    for k in range(opts.max_newton + 1):
        f = mismatch(state, scenario, model.y, model.part)
        fnorm = float(np.abs(f).max()) if f.size else 0.0
        if not np.isfinite(fnorm):
            diagnostic = "mismatch became non-finite (diverged iterate)"
            return NewtonResult(state, False, k, fnorm, tuple(gmres_counts), diagnostic)
        if fnorm <= opts.tol_mismatch:
            return NewtonResult(state, True, k, fnorm, tuple(gmres_counts), diagnostic)
        if state.vmag.size and state.vmag.min() <= 0.0:
            diagnostic = "voltage magnitude iterate collapsed to <= 0 (diverging)"
            return NewtonResult(state, False, k, fnorm, tuple(gmres_counts), diagnostic)
        if k == opts.max_newton:
            break

        op = _jvp_operator(state, model.y, model.part)
        if opts.precond == "fd":
            pre = build_preconditioner(
                model.views, state, model.part, opts.epsilon, factors
            )
            apply_pre = lambda v: apply_preconditioner(pre, v)  # noqa: E731
        else:
            apply_pre = None
        dx, stats = gmres(op, apply_pre, -f, opts.gmres)
        gmres_counts.append(stats.iterations)
        if stats.breakdown:
            diagnostic = f"GMRES breakdown at Newton iteration {k}"
        elif not stats.converged and diagnostic is None:
            diagnostic = (
                f"GMRES stagnated at Newton iteration {k} "
                f"(relres {stats.final_relres:.2e})"
            )
        state = state.with_packed(state.pack(model.part) + dx, model.part)

    return NewtonResult(state, False, opts.max_newton, fnorm, tuple(gmres_counts), diagnostic)


def dense_jacobian(
    state: PolarState, y: AdmittanceMatrix, part: BusPartition
) -> np.ndarray:
    """Explicit polar Jacobian [[dP/dth, dP/dV], [dQ/dth, dQ/dV]] on the free blocks.

    Vectorized complex-form assembly: with E the unit phasors and I = Y u,

        dS/dth = j diag(u) conj(diag(I) - Y diag(u))
        dS/dV  = diag(u) conj(Y diag(E)) + conj(diag(I)) diag(E)
    """
    yd = y.to_dense()
    u = state.vmag * np.exp(1j * state.theta)
    e = np.exp(1j * state.theta)
    i_inj = yd @ u
    y_diag_u = yd * u[np.newaxis, :]
    ds_dth = 1j * u[:, np.newaxis] * np.conj(np.diag(i_inj) - y_diag_u)
    ds_dv = u[:, np.newaxis] * np.conj(yd * e[np.newaxis, :]) + np.conj(
        np.diag(i_inj)
    ) * np.diag(e)
    tb, qb = part.theta_block, part.q_block
    h = ds_dth.real[np.ix_(tb, tb)]
    n_blk = ds_dv.real[np.ix_(tb, qb)]
    m_blk = ds_dth.imag[np.ix_(qb, tb)]
    l_blk = ds_dv.imag[np.ix_(qb, qb)]
    return np.block([[h, n_blk], [m_blk, l_blk]])


def dense_newton_oracle(
    net_or_model: TransmissionNetwork | TransmissionModel,
    scenario: TransmissionScenario | None = None,
    opts: NewtonOptions | None = None,
    start: PolarState | None = None,
) -> NewtonResult:
    """Reference Newton-Raphson: full dense Jacobian + LU solve per iteration.

    Same contract and stopping rule as :func:`newton_solve`; intended for
    verification at moderate sizes. Raises SingularJacobianError if the
    assembled Jacobian cannot be factorized.
    """
    opts = opts or NewtonOptions()
    model = _as_model(net_or_model, opts.epsilon)
    if scenario is None:
        scenario = base_scenario(model.net, model.part)
    state = start if start is not None else flat_start(model.net, model.part)

    fnorm = np.inf
    for k in range(opts.max_newton + 1):
        f = mismatch(state, scenario, model.y, model.part)
        fnorm = float(np.abs(f).max()) if f.size else 0.0
        if fnorm <= opts.tol_mismatch:
            return NewtonResult(state, True, k, fnorm, ())
        if k == opts.max_newton or not np.isfinite(fnorm):
            break
        jac = dense_jacobian(state, model.y, model.part)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(
                f"singular Jacobian at Newton iteration {k}"
            ) from exc
        state = state.with_packed(state.pack(model.part) + dx, model.part)

    return NewtonResult(state, False, opts.max_newton, fnorm, ())


# ---------------------------------------------------------------------------
# Flow bookkeeping (used for the slack power-balance certificate)
# ---------------------------------------------------------------------------


def branch_flows(
    net: TransmissionNetwork, state: PolarState
) -> tuple[np.ndarray, np.ndarray]:
    """Complex per-unit power entering each in-service branch at both ends.

    Returns (s_from, s_to) aligned with net.branches; out-of-service rows
    are zero. The sum s_from + s_to over all branches is the series plus
    charging loss of the network.
    """
    index = net.bus_index()
    u = state.vmag * np.exp(1j * state.theta)
    s_from = np.zeros(len(net.branches), dtype=complex)
    s_to = np.zeros(len(net.branches), dtype=complex)
    for b, br in enumerate(net.branches):
        if not br.status:
            continue
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_ch
        tap = br.tap * np.exp(1j * br.shift)
        f, t = index[br.from_bus], index[br.to_bus]
        yff = (ys + ysh) / (br.tap * br.tap)
        yft = -ys / np.conj(tap)
        ytf = -ys / tap
        ytt = ys + ysh
        i_f = yff * u[f] + yft * u[t]
        i_t = ytf * u[f] + ytt * u[t]
        s_from[b] = u[f] * np.conj(i_f)
        s_to[b] = u[t] * np.conj(i_t)
    return s_from, s_to
