"""Three-phase Z-Bus: schema, assembly, reduction, injections, fixed point.

Oracles: hand single-phase admittance stamps, an independent dense assembly
of the IEEE13 fixture done directly from the JSON in this file, the scalar
closed-form solution of v = -z conj(s/v) + v0, and the shipped reference
profile computed by the ported OPEN solver.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from acpflow.distribution import (
    DistributionScenario,
    FixedPointOptions,
    SchemaError,
    batch_zbus_solve,
    build_three_phase_ybus,
    build_zbus_model,
    current_injection,
    fixed_point_residual,
    kirchhoff_residual,
    parse_distribution_json,
    read_reference_voltages,
    reduce_zbus,
    zbus_iterate,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

TWO_NODE = json.dumps(
    {
        "schema": "acpflow-zbus-network/1",
        "name": "two-node",
        "buses": [{"id": "src", "phases": "a"}, {"id": "load", "phases": "a"}],
        "slack": {"bus": "src", "voltage": {"a": [1.0, 0.0]}},
        "lines": [
            {
                "from": "src",
                "to": "load",
                "phases": "a",
                "y_ff": [[[2.0, -6.0]]],
                "y_ft": [[[-2.0, 6.0]]],
                "y_tf": [[[-2.0, 6.0]]],
                "y_tt": [[[2.0, -6.0]]],
            }
        ],
        "shunts": [],
        "loads": [{"kind": "wye", "bus": "load", "phase": "a", "s": [0.1, 0.05]}],
    }
)


def _three_phase_pair(load_entries) -> str:
    a = np.exp(1j * 2 * np.pi / 3)
    y = np.diag([4.0 - 12.0j, 4.0 - 12.0j, 4.0 - 12.0j])
    enc = lambda m: [[[float(m[i, j].real), float(m[i, j].imag)] for j in range(3)] for i in range(3)]  # noqa: E731
    return json.dumps(
        {
            "schema": "acpflow-zbus-network/1",
            "name": "pair",
            "buses": [{"id": "s", "phases": "abc"}, {"id": "t", "phases": "abc"}],
            "slack": {
                "bus": "s",
                "voltage": {
                    "a": [1.0, 0.0],
                    "b": [float((a**2).real), float((a**2).imag)],
                    "c": [float(a.real), float(a.imag)],
                },
            },
            "lines": [
                {"from": "s", "to": "t", "phases": "abc",
                 "y_ff": enc(y), "y_ft": enc(-y), "y_tf": enc(-y), "y_tt": enc(y)}
            ],
            "shunts": [],
            "loads": load_entries,
        }
    )


@pytest.fixture(scope="module")
def ieee13_model():
    net = parse_distribution_json((FIXTURES / "ieee13.json").read_text())
    return net, build_zbus_model(net)


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


class TestSchema:
    def test_two_node_parses(self):
        net = parse_distribution_json(TWO_NODE)
        assert net.n_phases == 2
        assert net.slack_phase_indices().tolist() == [0]
        assert len(net.loads) == 1

    def test_ieee13_fixture(self):
        net = parse_distribution_json((FIXTURES / "ieee13.json").read_text())
        assert len(net.buses) == 13
        assert net.n_phases == 32  # 8 three-phase + 3 two-phase + 2 single-phase buses
        assert net.slack_bus == "650"

    def test_eulv_fixture_scale(self):
        net = parse_distribution_json((FIXTURES / "eulv.json").read_text())
        assert net.n_phases == 2724

    def test_dangling_bus_reference(self):
        bad = json.loads(TWO_NODE)
        bad["loads"][0]["bus"] = "ghost"
        with pytest.raises(SchemaError, match=r"\$\.loads\[0\]\.bus"):
            parse_distribution_json(json.dumps(bad))

    def test_phase_not_present_at_bus(self):
        bad = json.loads(TWO_NODE)
        bad["loads"][0]["phase"] = "b"
        with pytest.raises(SchemaError, match=r"\$\.loads\[0\]\.phase"):
            parse_distribution_json(json.dumps(bad))

    def test_wrong_schema_id(self):
        bad = json.loads(TWO_NODE)
        bad["schema"] = "something-else"
        with pytest.raises(SchemaError, match=r"\$\.schema"):
            parse_distribution_json(json.dumps(bad))

    def test_bad_matrix_shape_path(self):
        bad = json.loads(TWO_NODE)
        bad["lines"][0]["y_ff"] = [[[1.0, 0.0], [0.0, 0.0]]]
        with pytest.raises(SchemaError, match=r"\$\.lines\[0\]\.y_ff"):
            parse_distribution_json(json.dumps(bad))

    def test_load_on_slack_rejected(self):
        bad = json.loads(TWO_NODE)
        bad["loads"][0]["bus"] = "src"
        with pytest.raises(SchemaError, match="slack"):
            parse_distribution_json(json.dumps(bad))

    def test_delta_needs_ordered_pair(self):
        bad = json.loads(TWO_NODE)
        bad["loads"][0] = {"kind": "delta", "bus": "load", "phases": "aa", "s": [0.1, 0.0]}
        with pytest.raises(SchemaError, match="ordered pair"):
            parse_distribution_json(json.dumps(bad))


# ---------------------------------------------------------------------------
# admittance assembly and reduction
# ---------------------------------------------------------------------------


class TestAssembly:
    def test_single_phase_line_stamp(self):
        net = parse_distribution_json(TWO_NODE)
        y = build_three_phase_ybus(net).toarray()
        yl = 2.0 - 6.0j
        np.testing.assert_allclose(y, [[yl, -yl], [-yl, yl]], atol=1e-15)

    def test_diagonal_primitive_block_structure(self):
        net = parse_distribution_json(_three_phase_pair([]))
        y = build_three_phase_ybus(net).toarray()
        yph = 4.0 - 12.0j
        assert y[0, 0] == yph and y[1, 1] == yph and y[2, 2] == yph
        assert y[0, 3] == -yph and y[1, 4] == -yph
        assert y[0, 4] == 0 and y[0, 1] == 0  # no interphase coupling

    def test_ieee13_matches_independent_dense_assembly(self, ieee13_model):
        net, _ = ieee13_model
        got = build_three_phase_ybus(net).toarray()
        doc = json.loads((FIXTURES / "ieee13.json").read_text())
        order = [(b["id"], p) for b in doc["buses"] for p in b["phases"]]
        pos = {np_: k for k, np_ in enumerate(order)}
        expected = np.zeros((len(order), len(order)), dtype=complex)

        def dec(m):
            return np.array([[complex(c[0], c[1]) for c in row] for row in m])

        for ln in doc["lines"]:
            fidx = [pos[(ln["from"], p)] for p in ln["phases"]]
            tidx = [pos[(ln["to"], p)] for p in ln["phases"]]
            for blk, ridx, cidx in (
                ("y_ff", fidx, fidx), ("y_ft", fidx, tidx),
                ("y_tf", tidx, fidx), ("y_tt", tidx, tidx),
            ):
                m = dec(ln[blk])
                for i, r in enumerate(ridx):
                    for j, c in enumerate(cidx):
                        expected[r, c] += m[i, j]
        for sh in doc["shunts"]:
            sidx = [pos[(sh["bus"], p)] for p in sh["phases"]]
            m = dec(sh["y"])
            for i, r in enumerate(sidx):
                for j, c in enumerate(sidx):
                    expected[r, c] += m[i, j]
        assert np.abs(got - expected).max() < 1e-12

    def test_reduce_scalar_algebra(self):
        net = parse_distribution_json(TWO_NODE)
        y = build_three_phase_ybus(net)
        model = reduce_zbus(y, net.slack_phase_indices(), net.slack_voltages())
        y_nn = 2.0 - 6.0j
        y_ns = -(2.0 - 6.0j)
        np.testing.assert_allclose(model.z_apply(np.array([y_nn])), [1.0], rtol=1e-14)
        np.testing.assert_allclose(model.v0, [-y_ns * 1.0 / y_nn], rtol=1e-14)

    def test_z_apply_inverts_y_nn(self, ieee13_model):
        _, model = ieee13_model
        rng = np.random.default_rng(17)
        for _ in range(10):
            w = rng.normal(size=model.n) + 1j * rng.normal(size=model.n)
            back = model.z_apply(np.asarray(model.y_nn @ w).ravel())
            assert np.abs(back - w).max() < 1e-10 * max(1.0, np.abs(w).max())

    def test_v0_solves_no_load_equations(self, ieee13_model):
        _, model = ieee13_model
        lhs = model.y_nn @ model.v0
        rhs = -(model.y_ns @ model.v_slack)
        assert np.abs(lhs - rhs).max() < 1e-10 * np.abs(rhs).max()

    def test_v0_matches_dense_solve(self, ieee13_model):
        net, model = ieee13_model
        y = build_three_phase_ybus(net).toarray()
        ns = model.non_slack
        sl = net.slack_phase_indices()
        v0 = np.linalg.solve(y[np.ix_(ns, ns)], -y[np.ix_(ns, sl)] @ net.slack_voltages())
        assert np.abs(v0 - model.v0).max() < 1e-12


# ---------------------------------------------------------------------------
# current injection
# ---------------------------------------------------------------------------


class TestCurrentInjection:
    def test_zero_loads_zero_currents(self):
        net = parse_distribution_json(_three_phase_pair([]))
        model = build_zbus_model(net)
        sc = DistributionScenario(wye_s=model.wye_s, delta_s=model.delta_s)
        np.testing.assert_array_equal(
            current_injection(model.v0, sc, model), np.zeros(3, dtype=complex)
        )

    def test_single_wye_unit_load(self):
        net = parse_distribution_json(_three_phase_pair(
            [{"kind": "wye", "bus": "t", "phase": "a", "s": [1.0, 0.0]}]
        ))
        model = build_zbus_model(net)
        v = np.array([1.0 + 0j, np.exp(-1j * 2 * np.pi / 3), np.exp(1j * 2 * np.pi / 3)])
        i = current_injection(v, DistributionScenario(model.wye_s, model.delta_s), model)
        assert i[0] == pytest.approx(-1.0 + 0j, abs=1e-15)
        assert i[1] == 0 and i[2] == 0

    def test_delta_load_line_current_mapping(self):
        s = 0.1 + 0.0j
        net = parse_distribution_json(_three_phase_pair(
            [{"kind": "delta", "bus": "t", "phases": "ab", "s": [0.1, 0.0]}]
        ))
        model = build_zbus_model(net)
        va = 1.0 + 0j
        vb = np.exp(-1j * 2 * np.pi / 3)
        v = np.array([va, vb, np.exp(1j * 2 * np.pi / 3)])
        i = current_injection(v, DistributionScenario(model.wye_s, model.delta_s), model)
        i_line = np.conj(s / (va - vb))
        assert i[0] == pytest.approx(-i_line, abs=1e-15)
        assert i[1] == pytest.approx(+i_line, abs=1e-15)
        assert i[2] == 0
        # the two contributions of one delta load cancel exactly, bitwise
        assert i[0] == -i[1]

    def test_delta_contributions_cancel_exactly(self, ieee13_model):
        _, model = ieee13_model
        rng = np.random.default_rng(4)
        v = model.v0 * (1 + 0.01 * rng.normal(size=model.n))
        only_delta = DistributionScenario(np.zeros_like(model.wye_s), model.delta_s)
        i = current_injection(v, only_delta, model)
        assert abs(i.sum()) < 1e-14 * np.abs(i).max()

    def test_voltage_floor_reports_node_phase(self):
        net = parse_distribution_json(TWO_NODE)
        model = build_zbus_model(net)
        sc = DistributionScenario(model.wye_s, model.delta_s)
        from acpflow.distribution import VoltageFloorError

        with pytest.raises(VoltageFloorError, match="load.a"):
            current_injection(np.array([1e-9 + 0j]), sc, model)


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


class TestFixedPoint:
    def test_zero_loads_one_sweep(self):
        net = parse_distribution_json(_three_phase_pair([]))
        model = build_zbus_model(net)
        res = zbus_iterate(model)
        assert res.converged
        assert res.iterations == 1
        np.testing.assert_array_equal(res.v, model.v0)

    def test_no_load_exactness_machine_precision(self, ieee13_model):
        _, model = ieee13_model
        sc = DistributionScenario(np.zeros_like(model.wye_s), np.zeros_like(model.delta_s))
        res = zbus_iterate(model, sc)
        np.testing.assert_array_equal(res.v, model.v0)

    def test_scalar_closed_form(self):
        # v = -z conj(s/v) + v0 has the closed-form high-voltage solution
        #   t^2 + t (2 Re(conj(z) s) - |v0|^2) + |z|^2 |s|^2 = 0,  t = |v|^2
        #   v = (t + conj(z) s) / conj(v0)
        net = parse_distribution_json(TWO_NODE)
        model = build_zbus_model(net)
        res = zbus_iterate(model, opts=FixedPointOptions(tol=1e-14))
        y = 2.0 - 6.0j
        z = 1.0 / y
        s = 0.1 + 0.05j
        v0 = model.v0[0]
        b_ = 2 * np.real(np.conj(z) * s) - abs(v0) ** 2
        c_ = abs(z) ** 2 * abs(s) ** 2
        t = (-b_ + np.sqrt(b_ * b_ - 4 * c_)) / 2
        v_closed = (t + np.conj(z) * s) / np.conj(v0)
        assert res.converged
        assert abs(res.v[0] - v_closed) < 1e-12

    def test_ieee13_matches_reference_profile(self, ieee13_model):
        _, model = ieee13_model
        res = zbus_iterate(model)
        ids, mags, _angs = read_reference_voltages(FIXTURES / "ieee13_reference.csv")
        pos = {npid: k for k, npid in enumerate(model.reduced_ids())}
        assert res.converged
        got = np.array([abs(res.v[pos[i]]) for i in ids])
        assert np.abs(got - mags).max() < 1e-3

    def test_fixed_point_certificate(self, ieee13_model):
        _, model = ieee13_model
        res = zbus_iterate(model)
        assert res.converged
        assert res.residual_inf <= 1e-6
        # independent recomputation (different BLAS threading) stays certified
        sc = DistributionScenario(model.wye_s, model.delta_s)
        assert fixed_point_residual(model, sc, res.v) <= 1e-6

    def test_kirchhoff_balance(self, ieee13_model):
        _, model = ieee13_model
        res = zbus_iterate(model)
        sc = DistributionScenario(model.wye_s, model.delta_s)
        assert kirchhoff_residual(model, sc, res.v) <= 1e-8

    def test_divergent_load_returns_diagnostic(self):
        net = parse_distribution_json(TWO_NODE)
        model = build_zbus_model(net)
        sc = DistributionScenario(wye_s=model.wye_s * 500.0, delta_s=model.delta_s)
        res = zbus_iterate(model, sc)
        assert not res.converged

    def test_result_reports_final_delta(self, ieee13_model):
        _, model = ieee13_model
        res = zbus_iterate(model, opts=FixedPointOptions(tol=1e-9, max_iter=100))
        assert res.converged
        assert res.final_delta <= 1e-9


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class TestBatch:
    def test_batch_of_one_equals_single(self, ieee13_model):
        _, model = ieee13_model
        sc = DistributionScenario(model.wye_s * 1.1, model.delta_s * 0.9)
        single = zbus_iterate(model, sc)
        [batched] = batch_zbus_solve(model, [sc])
        np.testing.assert_array_equal(single.v, batched.v)
        assert single.iterations == batched.iterations

    def test_hundred_identical_scenarios(self, ieee13_model):
        _, model = ieee13_model
        sc = DistributionScenario(model.wye_s, model.delta_s)
        out = batch_zbus_solve(model, [sc] * 100)
        assert len(out) == 100
        for r in out[1:]:
            np.testing.assert_array_equal(r.v, out[0].v)

    def test_parallel_bitwise_equals_sequential(self, ieee13_model):
        _, model = ieee13_model
        rng = np.random.default_rng(11)
        scenarios = [
            DistributionScenario(
                model.wye_s * rng.uniform(0.8, 1.2, model.wye_s.size),
                model.delta_s * rng.uniform(0.8, 1.2, model.delta_s.size),
            )
            for _ in range(12)
        ]
        seq = [zbus_iterate(model, sc) for sc in scenarios]
        par = batch_zbus_solve(model, scenarios, parallelism=2)
        for a, b in zip(seq, par):
            np.testing.assert_array_equal(a.v, b.v)
            assert a.iterations == b.iterations
            assert a.final_delta == b.final_delta
            assert a.residual_inf == b.residual_inf
