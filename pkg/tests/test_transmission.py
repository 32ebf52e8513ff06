"""Newton-Raphson solver, Jacobian-vector products, and the fast-decoupled
preconditioner.

Independent oracles used here: hand-derived polar injection values for the
two-bus reactance case, the closed-form two-bus voltage solution, central
finite differences of the mismatch map, dense block assembly of the
preconditioner, and the dense-LU Newton oracle.
"""

from pathlib import Path

import numpy as np
import pytest

from acpflow.network import parse_matpower_case
from acpflow.sparse import GmresOptions
from acpflow.transmission import (
    NewtonOptions,
    TransmissionScenario,
    apply_preconditioner,
    base_scenario,
    branch_flows,
    build_preconditioner,
    build_transmission_model,
    calc_injections,
    dense_jacobian,
    dense_newton_oracle,
    flat_start,
    jacobian_vector_product,
    mismatch,
    newton_solve,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

CASE2 = """function mpc = case2
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1.0 0 345 1 1.1 0.9;
 2 1 10 5 0 0 1 1.0 0 345 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 999 -999 1.0 100 1 999 -999;
];
mpc.branch = [
 1 2 0.0 0.1 0.0 0 0 0 0 0 1;
];
"""

NOLOAD = CASE2.replace(" 2 1 10 5 ", " 2 1 0 0 ")


@pytest.fixture(scope="module")
def case118_model():
    net = parse_matpower_case((FIXTURES / "case118.m").read_text())
    return build_transmission_model(net)


@pytest.fixture(scope="module")
def case2_model():
    return build_transmission_model(parse_matpower_case(CASE2))


def _packed_like(model):
    return model.part.n_theta + model.part.n_q


def _random_feasible_state(model, rng, angle_scale=0.05, v_scale=0.04):
    st = flat_start(model.net, model.part)
    dx = np.concatenate(
        [
            rng.normal(scale=angle_scale, size=model.part.n_theta),
            rng.normal(scale=v_scale, size=model.part.n_q),
        ]
    )
    return st.with_packed(st.pack(model.part) + dx, model.part)


# ---------------------------------------------------------------------------
# injections and mismatch
# ---------------------------------------------------------------------------


class TestInjections:
    def test_flat_no_load_network_is_balanced(self):
        model = build_transmission_model(parse_matpower_case(NOLOAD))
        st = flat_start(model.net, model.part)
        p, q = calc_injections(st, model.y)
        np.testing.assert_allclose(p, 0.0, atol=1e-15)
        np.testing.assert_allclose(q, 0.0, atol=1e-15)

    def test_two_bus_hand_values(self, case2_model):
        # V = (1, 1), theta = (0, -0.01) on the x = 0.1 line:
        #   P2 = 10 sin(-0.01), Q2 = 10 - 10 cos(0.01)
        model = case2_model
        st = flat_start(model.net, model.part)
        st = st.with_packed(np.array([-0.01, 1.0]), model.part)
        p, q = calc_injections(st, model.y)
        assert p[1] == pytest.approx(10 * np.sin(-0.01), abs=1e-14)
        assert p[0] == pytest.approx(-10 * np.sin(-0.01), abs=1e-14)
        assert q[1] == pytest.approx(10 - 10 * np.cos(0.01), abs=1e-14)
        assert q[0] == pytest.approx(10 - 10 * np.cos(0.01), abs=1e-14)

    def test_case118_injections_match_dense_evaluation(self, case118_model):
        # dense complex-power evaluation S = diag(u) conj(Y_dense u)
        model = case118_model
        rng = np.random.default_rng(3)
        st = _random_feasible_state(model, rng)
        u = st.vmag * np.exp(1j * st.theta)
        s = u * np.conj(model.y.to_dense() @ u)
        p, q = calc_injections(st, model.y)
        assert np.abs(p - s.real).max() < 1e-10
        assert np.abs(q - s.imag).max() < 1e-10

    def test_mismatch_two_bus_flat_with_load(self, case2_model):
        # flat start, PQ load 0.1 + j0.05 -> F = [0.1, 0.05]
        model = case2_model
        st = flat_start(model.net, model.part)
        sc = base_scenario(model.net, model.part)
        f = mismatch(st, sc, model.y, model.part)
        np.testing.assert_allclose(f, [0.1, 0.05], atol=1e-15)

    def test_mismatch_zero_scenario_flat_is_zero(self):
        model = build_transmission_model(parse_matpower_case(NOLOAD))
        st = flat_start(model.net, model.part)
        sc = base_scenario(model.net, model.part)
        f = mismatch(st, sc, model.y, model.part)
        np.testing.assert_allclose(f, 0.0, atol=1e-15)

    def test_converged_state_has_small_mismatch(self, case118_model):
        model = case118_model
        res = newton_solve(model)
        assert res.converged
        f = mismatch(res.state, base_scenario(model.net, model.part), model.y, model.part)
        assert np.abs(f).max() <= 1e-8


# ---------------------------------------------------------------------------
# Jacobian-vector product
# ---------------------------------------------------------------------------


class TestJvp:
    def test_zero_direction(self, case118_model):
        model = case118_model
        st = flat_start(model.net, model.part)
        dx = np.zeros(_packed_like(model))
        np.testing.assert_array_equal(
            jacobian_vector_product(st, model.y, model.part, dx), np.zeros_like(dx)
        )

    def test_matches_central_differences_case118(self, case118_model):
        model = case118_model
        rng = np.random.default_rng(21)
        sc = base_scenario(model.net, model.part)
        h = 1e-6
        for _ in range(20):
            st = _random_feasible_state(model, rng)
            dx = rng.normal(size=_packed_like(model))
            jv = jacobian_vector_product(st, model.y, model.part, dx)
            x0 = st.pack(model.part)
            fp = mismatch(st.with_packed(x0 + h * dx, model.part), sc, model.y, model.part)
            fm = mismatch(st.with_packed(x0 - h * dx, model.part), sc, model.y, model.part)
            fd = (fp - fm) / (2 * h)
            assert np.abs(jv - fd).max() <= 1e-6 * (1 + np.abs(jv).max())

    def test_two_bus_matches_dense_jacobian(self, case2_model):
        model = case2_model
        rng = np.random.default_rng(8)
        st = _random_feasible_state(model, rng)
        jac = dense_jacobian(st, model.y, model.part)
        assert jac.shape == (2, 2)
        for e in np.eye(2):
            jv = jacobian_vector_product(st, model.y, model.part, e)
            assert np.abs(jv - jac @ e).max() < 1e-12

    def test_linearity(self, case118_model):
        model = case118_model
        rng = np.random.default_rng(13)
        st = _random_feasible_state(model, rng)
        x, y_ = rng.normal(size=(2, _packed_like(model)))
        a, b = 0.7, -1.3
        lhs = jacobian_vector_product(st, model.y, model.part, a * x + b * y_)
        rhs = a * jacobian_vector_product(st, model.y, model.part, x) + (
            b * jacobian_vector_product(st, model.y, model.part, y_)
        )
        assert np.abs(lhs - rhs).max() < 1e-11

    def test_dimension_check(self, case2_model):
        with pytest.raises(ValueError, match="direction has size"):
            jacobian_vector_product(
                flat_start(case2_model.net, case2_model.part),
                case2_model.y,
                case2_model.part,
                np.zeros(5),
            )


# ---------------------------------------------------------------------------
# fast-decoupled preconditioner
# ---------------------------------------------------------------------------


def _dense_precond_matrix(model, state, eps):
    nt, nq = model.part.n_theta, model.part.n_q
    m = np.zeros((nt + nq, nt + nq))
    m[:nt, :nt] = np.diag(state.vmag[model.part.theta_block]) @ (
        model.views.b_prime.to_dense() + eps * np.eye(nt)
    )
    m[nt:, :nt] = model.views.g_qtheta.to_dense()
    m[nt:, nt:] = np.diag(state.vmag[model.part.q_block]) @ (
        model.views.b_dprime.to_dense() + eps * np.eye(nq)
    )
    return m


class TestPreconditioner:
    def test_unit_voltage_reduces_to_regularized_blocks(self, case2_model):
        model = case2_model
        st = flat_start(model.net, model.part)
        eps = 1e-6
        pre = build_preconditioner(model.views, st, model.part, eps)
        # apply to r = (10 + eps, 0): z_theta = 1 exactly, z_q = 0
        z = apply_preconditioner(pre, np.array([10.0 + eps, 0.0]))
        assert z[0] == pytest.approx(1.0, rel=1e-12)
        assert z[1] == pytest.approx(0.0, abs=1e-15)

    def test_two_bus_matches_hand_assembled_block(self, case2_model):
        model = case2_model
        st = flat_start(model.net, model.part)
        eps = 1e-6
        pre = build_preconditioner(model.views, st, model.part, eps)
        m = np.diag([10.0 + eps, 10.0 + eps])  # G coupling is zero here
        rng = np.random.default_rng(2)
        r = rng.normal(size=2)
        np.testing.assert_allclose(
            apply_preconditioner(pre, r), np.linalg.solve(m, r), rtol=1e-12
        )

    def test_matches_dense_inverse_random_small(self):
        net = parse_matpower_case((FIXTURES / "case118.m").read_text())
        model = build_transmission_model(net)
        rng = np.random.default_rng(31)
        eps = 1e-6
        st = _random_feasible_state(model, rng)
        pre = build_preconditioner(model.views, st, model.part, eps, model.fd_factors)
        m = _dense_precond_matrix(model, st, eps)
        for _ in range(5):
            r = rng.normal(size=m.shape[0])
            z = apply_preconditioner(pre, r)
            zd = np.linalg.solve(m, r)
            assert np.abs(z - zd).max() / np.abs(zd).max() < 1e-10

    def test_apply_then_multiply_recovers_case118(self, case118_model):
        model = case118_model
        rng = np.random.default_rng(37)
        st = _random_feasible_state(model, rng)
        eps = model.epsilon
        pre = build_preconditioner(model.views, st, model.part, eps, model.fd_factors)
        m = _dense_precond_matrix(model, st, eps)
        r = rng.normal(size=m.shape[0])
        back = m @ apply_preconditioner(pre, r)
        assert np.abs(back - r).max() / np.abs(r).max() < 1e-9

    def test_nonpositive_voltage_rejected(self, case2_model):
        model = case2_model
        st = flat_start(model.net, model.part)
        bad = st.with_packed(np.array([0.0, -0.5]), model.part)
        with pytest.raises(ValueError, match="strictly positive"):
            build_preconditioner(model.views, bad, model.part, 1e-6)

    def test_network_level_factors_reused(self, case118_model):
        model = case118_model
        st = flat_start(model.net, model.part)
        pre = build_preconditioner(
            model.views, st, model.part, model.epsilon, model.fd_factors
        )
        assert pre.fac_bprime is model.fd_factors[0]
        assert pre.fac_bdprime is model.fd_factors[1]


class TestJacobianBlocks:
    def test_coupling_block_entries_match_literal_formula(self, case118_model):
        # dQ/dtheta: off-diagonal -Vi Vj (Gij cos(th_ij) + Bij sin(th_ij)),
        # diagonal P_i - G_ii Vi^2 -- the exact entries whose conductance
        # surrogate the preconditioner keeps
        model = case118_model
        rng = np.random.default_rng(77)
        st = _random_feasible_state(model, rng)
        jac = dense_jacobian(st, model.y, model.part)
        nt = model.part.n_theta
        m_blk = jac[nt:, :nt]
        gd = model.y.g.to_dense()
        bd = model.y.b.to_dense()
        p_calc, _ = calc_injections(st, model.y)
        v, th = st.vmag, st.theta
        for _ in range(200):
            iq = rng.integers(0, model.part.n_q)
            jt = rng.integers(0, model.part.n_theta)
            i = model.part.q_block[iq]
            j = model.part.theta_block[jt]
            if i == j:
                expected = p_calc[i] - gd[i, i] * v[i] ** 2
            else:
                th_ij = th[i] - th[j]
                expected = -v[i] * v[j] * (
                    gd[i, j] * np.cos(th_ij) + bd[i, j] * np.sin(th_ij)
                )
            assert m_blk[iq, jt] == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# Newton solves
# ---------------------------------------------------------------------------


class TestNewton:
    def test_no_load_converges_immediately(self):
        model = build_transmission_model(parse_matpower_case(NOLOAD))
        res = newton_solve(model)
        assert res.converged
        assert res.iterations == 0
        assert res.final_mismatch_inf == 0.0

    def test_two_bus_closed_form(self, case2_model):
        # closed-form PQ voltage for an x-only line with load P + jQ:
        #   V2^2 = ((1 - 2 Q x) + sqrt((1 - 2 Q x)^2 - 4 x^2 (P^2+Q^2))) / 2
        #   sin(theta2) = -P x / V2
        model = case2_model
        res = newton_solve(model, opts=NewtonOptions(tol_mismatch=1e-12))
        p_, q_, x_ = 0.1, 0.05, 0.1
        disc = (1 - 2 * q_ * x_) ** 2 - 4 * x_ * x_ * (p_ * p_ + q_ * q_)
        v2 = np.sqrt(((1 - 2 * q_ * x_) + np.sqrt(disc)) / 2)
        th2 = np.arcsin(-p_ * x_ / v2)
        assert res.converged
        assert res.state.vmag[1] == pytest.approx(v2, abs=1e-12)
        assert res.state.theta[1] == pytest.approx(th2, abs=1e-12)

    def test_oracle_two_bus_closed_form(self, case2_model):
        res = dense_newton_oracle(case2_model, opts=NewtonOptions(tol_mismatch=1e-12))
        p_, q_, x_ = 0.1, 0.05, 0.1
        disc = (1 - 2 * q_ * x_) ** 2 - 4 * x_ * x_ * (p_ * p_ + q_ * q_)
        v2 = np.sqrt(((1 - 2 * q_ * x_) + np.sqrt(disc)) / 2)
        assert res.state.vmag[1] == pytest.approx(v2, abs=1e-12)

    def test_case118_agrees_with_dense_oracle(self, case118_model):
        model = case118_model
        res = newton_solve(model)
        orc = dense_newton_oracle(model)
        assert res.converged and orc.converged
        assert np.abs(res.state.theta - orc.state.theta).max() < 1e-10
        assert np.abs(res.state.vmag - orc.state.vmag).max() < 1e-10

    @pytest.mark.slow
    def test_largest_fixture_agrees_with_dense_oracle(self):
        # base-case spot check at the 2224-bus scale (the seeded scenario
        # sweeps run on the smaller fixtures in the acceptance suite)
        net = parse_matpower_case((FIXTURES / "gb2224.m").read_text())
        model = build_transmission_model(net)
        res = newton_solve(model)
        orc = dense_newton_oracle(model)
        assert res.converged and orc.converged
        assert np.abs(res.state.theta - orc.state.theta).max() < 1e-10
        assert np.abs(res.state.vmag - orc.state.vmag).max() < 1e-10

    def test_oracle_noload_is_flat(self):
        model = build_transmission_model(parse_matpower_case(NOLOAD))
        res = dense_newton_oracle(model)
        assert res.converged
        np.testing.assert_allclose(res.state.vmag, 1.0, atol=1e-15)
        np.testing.assert_allclose(res.state.theta, 0.0, atol=1e-15)

    def test_infeasible_scenario_fails_gracefully(self, case118_model):
        model = case118_model
        sc = base_scenario(model.net, model.part)
        huge = TransmissionScenario(p_spec=50 * sc.p_spec, q_spec=50 * sc.q_spec)
        res = newton_solve(model, huge)
        assert not res.converged
        assert res.diagnostic is not None

    def test_solution_certificate_recomputed(self, case118_model):
        model = case118_model
        opts = NewtonOptions(tol_mismatch=1e-9)
        res = newton_solve(model, opts=opts)
        assert res.converged
        f = mismatch(res.state, base_scenario(model.net, model.part), model.y, model.part)
        assert np.abs(f).max() <= opts.tol_mismatch

    def test_slack_and_pv_pinned(self, case118_model):
        model = case118_model
        res = newton_solve(model)
        for i in model.part.slack:
            assert res.state.theta[i] == model.net.buses[i].theta_set
            assert res.state.vmag[i] == model.net.buses[i].v_set
        for i in model.part.pv:
            assert res.state.vmag[i] == model.net.buses[i].v_set

    def test_slack_power_balance(self, case118_model):
        # slack P equals total load minus other generation plus series and
        # shunt losses computed from branch flows
        model = case118_model
        res = newton_solve(model, opts=NewtonOptions(tol_mismatch=1e-10))
        p_calc, _ = calc_injections(res.state, model.y)
        s_from, s_to = branch_flows(model.net, res.state)
        branch_loss = (s_from + s_to).sum().real
        shunt_loss = sum(
            b.gs * res.state.vmag[i] ** 2 for i, b in enumerate(model.net.buses)
        )
        slack_i = model.part.slack[0]
        others = sum(
            b.p_inj for i, b in enumerate(model.net.buses) if i != slack_i
        )
        assert p_calc[slack_i] == pytest.approx(
            -others + branch_loss + shunt_loss, abs=1e-8
        )

    def test_preconditioner_ablation_effectiveness(self, case118_model):
        model = case118_model
        fd = newton_solve(model, opts=NewtonOptions(precond="fd"))
        bare = newton_solve(model, opts=NewtonOptions(precond="none"))
        assert fd.converged
        assert fd.total_gmres_iterations <= 0.5 * bare.total_gmres_iterations

    def test_deterministic_across_calls(self, case118_model):
        r1 = newton_solve(case118_model)
        r2 = newton_solve(case118_model)
        assert np.array_equal(r1.state.theta, r2.state.theta)
        assert np.array_equal(r1.state.vmag, r2.state.vmag)
        assert r1.per_iteration_gmres == r2.per_iteration_gmres

    def test_custom_gmres_options_respected(self, case118_model):
        opts = NewtonOptions(gmres=GmresOptions(tol=1e-4, restart=10, max_outer=2))
        res = newton_solve(case118_model, opts=opts)
        assert res.converged  # looser inner tolerance still reaches the root


class TestStatePacking:
    def test_pack_unpack_bijection(self, case118_model):
        model = case118_model
        rng = np.random.default_rng(55)
        st = flat_start(model.net, model.part)
        x = rng.normal(size=model.part.n_theta + model.part.n_q)
        st2 = st.with_packed(x, model.part)
        np.testing.assert_array_equal(st2.pack(model.part), x)
        # fixed entries untouched by packing
        for i in model.part.slack:
            assert st2.theta[i] == st.theta[i]
            assert st2.vmag[i] == st.vmag[i]
        for i in model.part.pv:
            assert st2.vmag[i] == st.vmag[i]
