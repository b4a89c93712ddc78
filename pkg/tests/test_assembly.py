"""State-space assembly: thermal coefficients, user blocks, full matrices."""

import numpy as np
import pytest

from conftest import (random_flow_case, two_user_network, TWO_USER_BUILDINGS,
                      TWO_USER_DRAWS, TWO_USER_PARAMS, TWO_USER_SUPPLY, pipe)
from oracles import bisection_alpha
from dhnkit.assembly import (append_buildings, assemble, reduce_feeding,
                             thermal_coeffs, user_block)
from dhnkit.hydraulics import solve_flow_split
from dhnkit.topology import (FluidProps, NetworkTopology, PipeParams,
                             SplitNode, UserNode, node_sets, state_dimension)

RHO = 971.0
CP = 4179.0
FLUID = FluidProps(rho=RHO, cp=CP)


class TestThermalCoeffs:
    def test_zero_flow_zero_loss(self):
        p = pipe(10.0, 0.05, 0.0, 0.0)
        c = thermal_coeffs(p, 0.0, FLUID)
        assert (c.c1, c.c2, c.c3) == (0.0, 0.0, 0.0)
        assert c.c4 < 0

    def test_direct_substitution(self):
        p = PipeParams(length=1.0, diameter=0.1, hA_s=0.0, volume=0.1,
                       zeta=0.0)
        c = thermal_coeffs(p, 2.0, FLUID)
        assert c.c1 == pytest.approx(2.0 / 97.1, rel=1e-12)

    def test_loss_coefficient_two_ways(self):
        # hA_s from the surface formula equals the direct lumped value
        h, D, L = 1.5, 0.40, 100.0
        hA = h * np.pi * D * L
        p = PipeParams(length=L, diameter=D, hA_s=hA, zeta=0.0)
        c = thermal_coeffs(p, 5.0, FLUID)
        expanded = (h * np.pi * D * L) / (RHO * CP * np.pi * (D / 2)**2 * L)
        assert c.c2 == pytest.approx(expanded, rel=1e-12)

    def test_c3_is_negated_sum(self):
        p = pipe(25.0, 0.06, 3.3, 0.0)
        c = thermal_coeffs(p, 1.2, FLUID)
        assert c.c3 == -(c.c1 + c.c2)


def c1(m, pipe_):
    return m / (RHO * pipe_.volume)


def c2(pipe_):
    return pipe_.hA_s / (RHO * CP * pipe_.volume)


def c3(m, pipe_):
    return -(c1(m, pipe_) + c2(pipe_))


def c4(pipe_):
    return -1.0 / (RHO * CP * pipe_.volume)


class TestUserBlock:
    def user(self):
        return two_user_network().nodes[1]

    def test_zero_bypass_flow_decouples_bypass_column(self):
        u = self.user()
        a, e = user_block(u, {"F": 1.0, "U": 1.0, "B": 0.0, "R": 1.0}, FLUID)
        assert a.shape == (6, 6)
        assert a[4, 5] == 0.0                      # no advection from bypass
        assert a[5, 0] == 0.0                      # bypass carries no flow
        assert a[5, 5] == pytest.approx(-c2(u.bypass))

    def test_even_mixing_ratios(self):
        u = self.user()
        a, _ = user_block(u, {"F": 1.0, "U": 0.4, "B": 0.4, "R": 0.8}, FLUID)
        cr1 = c1(0.8, u.ret)
        assert a[4, 3] == pytest.approx(0.5 * cr1, rel=1e-12)
        assert a[4, 5] == pytest.approx(0.5 * cr1, rel=1e-12)

    def test_zero_return_flow_guard(self):
        u = self.user()
        a, _ = user_block(u, {"F": 0.0, "U": 0.0, "B": 0.0, "R": 0.0}, FLUID)
        assert a[4, 3] == 0.0 and a[4, 5] == 0.0

    def test_block_matches_hand_formulas(self):
        u = self.user()
        f, d, b, r = 1.1, 0.5, 0.6, 1.1
        a, e = user_block(u, {"F": f, "U": d, "B": b, "R": r}, FLUID)
        want = np.zeros((6, 6))
        want[0, 0] = c3(f, u.feeding)
        want[1, 0] = c1(d, u.s1)
        want[1, 1] = c3(d, u.s1)
        want[2, 1] = c1(d, u.s2)
        want[2, 2] = -c1(d, u.s2)
        want[3, 2] = c1(d, u.s3)
        want[3, 3] = c3(d, u.s3)
        want[4, 3] = (d / r) * c1(r, u.ret)
        want[4, 4] = c3(r, u.ret)
        want[4, 5] = (b / r) * c1(r, u.ret)
        want[5, 0] = c1(b, u.bypass)
        want[5, 5] = c3(b, u.bypass)
        np.testing.assert_allclose(a, want, rtol=1e-12, atol=0.0)
        want_e = np.zeros((6, 2))
        want_e[:, 0] = [c2(u.feeding), c2(u.s1), 0.0, c2(u.s3), c2(u.ret),
                        c2(u.bypass)]
        want_e[2, 1] = c4(u.s2)
        np.testing.assert_allclose(e, want_e, rtol=1e-12, atol=0.0)


def golden_two_user_matrices():
    """Hand-assembled matrices of the two-user network, straight from the
    per-segment energy balances. Flows come from an independent bisection."""
    topo = two_user_network()
    m0 = TWO_USER_SUPPLY
    d1, d2 = TWO_USER_DRAWS[1], TWO_USER_DRAWS[2]
    zf = (TWO_USER_PARAMS[1]["F"][3], TWO_USER_PARAMS[2]["F"][3])
    zb = (TWO_USER_PARAMS[1]["B"][3], TWO_USER_PARAMS[2]["B"][3])
    alpha = bisection_alpha(zf, zb, (d1, d2), m0)
    f1, f2 = alpha * m0, (1.0 - alpha) * m0
    b1, b2 = f1 - d1, f2 - d2
    u1, u2, sp = topo.nodes[1], topo.nodes[2], topo.nodes[3]

    A = np.zeros((14, 14))
    B = np.zeros((14, 1))
    E = np.zeros((14, 3))
    # state order: F:3 | user1 (F,S1,S2,S3,R,B) | user2 (...) | R:3
    A[0, 0] = c3(m0, sp.feeding)
    B[0, 0] = c1(m0, sp.feeding)
    E[0, 0] = c2(sp.feeding)

    def fill_user(base, u, f, d, b, col):
        A[base + 0, 0] = c1(f, u.feeding)          # fed by the split header
        A[base + 0, base + 0] = c3(f, u.feeding)
        A[base + 1, base + 0] = c1(d, u.s1)
        A[base + 1, base + 1] = c3(d, u.s1)
        A[base + 2, base + 1] = c1(d, u.s2)
        A[base + 2, base + 2] = -c1(d, u.s2)
        A[base + 3, base + 2] = c1(d, u.s3)
        A[base + 3, base + 3] = c3(d, u.s3)
        A[base + 4, base + 3] = (d / f) * c1(f, u.ret)
        A[base + 4, base + 4] = c3(f, u.ret)
        A[base + 4, base + 5] = (b / f) * c1(f, u.ret)
        A[base + 5, base + 0] = c1(b, u.bypass)
        A[base + 5, base + 5] = c3(b, u.bypass)
        E[base + 0, 0] = c2(u.feeding)
        E[base + 1, 0] = c2(u.s1)
        E[base + 3, 0] = c2(u.s3)
        E[base + 4, 0] = c2(u.ret)
        E[base + 5, 0] = c2(u.bypass)
        E[base + 2, col] = c4(u.s2)
        # user return feeds the split's return header, weighted by its share
        A[13, base + 4] = (f / m0) * c1(m0, sp.ret)

    fill_user(1, u1, f1, d1, b1, col=1)
    fill_user(7, u2, f2, d2, b2, col=2)
    A[13, 13] = c3(m0, sp.ret)
    E[13, 0] = c2(sp.ret)
    return topo, A, B, E


class TestAssembleGolden:
    def test_two_user_matrices_entrywise(self):
        topo, A_ref, B_ref, E_ref = golden_two_user_matrices()
        sol = solve_flow_split(topo, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        model = assemble(topo, sol)
        assert model.labels == (
            "F:3", "F:1", "S1:1", "S2:1", "S3:1", "R:1", "B:1",
            "F:2", "S1:2", "S2:2", "S3:2", "R:2", "B:2", "R:3")
        A, B, E = model.a_dense(), model.b_dense(), model.e_dense()
        # every nonzero matches the hand formula; zeros are exactly zero
        for M, M_ref in ((A, A_ref), (B, B_ref), (E, E_ref)):
            nz = M_ref != 0.0
            np.testing.assert_allclose(M[nz], M_ref[nz], rtol=2e-6)
            assert np.all(M[~nz] == 0.0)

    def test_golden_alpha_close_enough_for_tight_compare(self):
        # with the solver's alpha inserted into the hand formulas the match
        # tightens to machine precision
        topo, *_ = golden_two_user_matrices()
        sol = solve_flow_split(topo, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        f1 = sol.feeding[1]
        u1 = topo.nodes[1]
        model = assemble(topo, sol)
        got = model.a_dense()[model.row(1, "F"), model.row(1, "F")]
        assert got == pytest.approx(c3(f1, u1.feeding), rel=1e-12)

    def test_seven_region_sparsity(self):
        topo, *_ = golden_two_user_matrices()
        sol = solve_flow_split(topo, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        A = assemble(topo, sol).a_dense()
        # feeding header row may not couple to the return header and back
        assert A[0, 13] == 0.0 and A[13, 0] == 0.0
        # user blocks do not couple to each other
        assert np.all(A[1:7, 7:13] == 0.0)
        assert np.all(A[7:13, 1:7] == 0.0)

    def test_degenerate_single_user_no_split(self):
        u = two_user_network().nodes[1]
        topo = NetworkTopology(nodes={1: u}, edges=frozenset({(0, 1)}))
        sol = solve_flow_split(topo, 1.0, {1: 0.4})
        model = assemble(topo, sol)
        a_blk, e_blk = user_block(
            u, {"F": 1.0, "U": 0.4, "B": 0.6, "R": 1.0}, FLUID)
        np.testing.assert_allclose(model.a_dense(), a_blk, rtol=1e-12)
        B = model.b_dense()
        assert B[0, 0] == pytest.approx(c1(1.0, u.feeding), rel=1e-12)
        assert np.all(B[1:] == 0.0)
        np.testing.assert_allclose(model.e_dense(), e_blk, rtol=1e-12)


THETA = 57.0


def equilibrium_residual(model, theta=THETA):
    A, B, E = model.a_dense(), model.b_dense(), model.e_dense()
    x = np.full(A.shape[0], theta)
    return A @ x + B[:, 0] * theta + E[:, 0] * theta


class TestAssembleProperties:
    def test_uniform_temperature_is_equilibrium_random(self):
        for seed in range(15):
            topo, supply, draws = random_flow_case(seed)
            sol = solve_flow_split(topo, supply, draws)
            model = assemble(topo, sol)
            resid = equilibrium_residual(model)
            scale = np.max(np.abs(model.a_dense())) * THETA
            assert np.max(np.abs(resid)) <= 1e-12 * scale

    def test_state_dimension_matches_rows(self):
        for seed in range(10):
            topo, supply, draws = random_flow_case(seed)
            sol = solve_flow_split(topo, supply, draws)
            model = assemble(topo, sol)
            assert model.n_states == state_dimension(topo)

    def test_index_map_provenance(self):
        topo, supply, draws = random_flow_case(3)
        sol = solve_flow_split(topo, supply, draws)
        model = assemble(topo, sol)
        # every diagonal entry equals the segment's own decay coefficient
        for (node, seg), row in model.index.items():
            p = topo.nodes[node].segments()[seg]
            m = sol.segment_flow(node, seg)
            expect = -c1(m, p) if seg == "S2" else c3(m, p)
            assert model.a_dense()[row, row] == pytest.approx(expect,
                                                              rel=1e-12)


class TestAppendBuildings:
    def test_equilibrium_preserved(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        model = append_buildings(assemble(two_user, sol),
                                 TWO_USER_BUILDINGS)
        resid = equilibrium_residual(model)
        scale = np.max(np.abs(model.a_dense())) * THETA
        assert np.max(np.abs(resid)) <= 1e-12 * scale
        # demand columns no longer externally coupled
        assert np.all(model.e_dense()[:, 1:] == 0.0)

    def test_first_order_lag_rate(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        b = TWO_USER_BUILDINGS[1]
        lossless = {1: type(b)(hA_s_hex=b.hA_s_hex, hA_s_env=1e-9,
                               thermal_capacity=b.thermal_capacity),
                    2: TWO_USER_BUILDINGS[2]}
        model = append_buildings(assemble(two_user, sol), lossless)
        row = model.row(1, "Tb")
        A = model.a_dense()
        rate = b.hA_s_hex / b.thermal_capacity
        assert A[row, row] == pytest.approx(-rate, rel=1e-6)
        assert A[row, model.row(1, "S2")] == pytest.approx(rate, rel=1e-9)

    def test_steady_state_heat_balance(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        model = append_buildings(assemble(two_user, sol),
                                 TWO_USER_BUILDINGS)
        A, B, E = model.a_dense(), model.b_dense(), model.e_dense()
        t0, tamb = 78.0, 4.0
        x = np.linalg.solve(A, -(B[:, 0] * t0 + E[:, 0] * tamb))
        for u in (1, 2):
            b = TWO_USER_BUILDINGS[u]
            ts2 = x[model.row(u, "S2")]
            tb = x[model.row(u, "Tb")]
            q_in = b.hA_s_hex * (ts2 - tb)
            q_out = b.hA_s_env * (tb - tamb)
            assert q_in == pytest.approx(q_out, rel=1e-9)

    def test_missing_building_rejected(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        with pytest.raises(ValueError):
            append_buildings(assemble(two_user, sol),
                             {1: TWO_USER_BUILDINGS[1]})


class TestReduceFeeding:
    def test_two_user_reduction_states(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        red = reduce_feeding(two_user, sol)
        assert red.labels == ("F:3", "F:1", "F:2")
        assert red.A.shape == (3, 3)

    def test_chain_is_lower_triangular(self):
        from test_topology import chain_topology
        topo = chain_topology(3)
        sol = solve_flow_split(topo, 1.0, {1: 0.2, 2: 0.2, 3: 0.2})
        red = reduce_feeding(topo, sol)
        assert np.all(np.triu(red.A, k=1) == 0.0)
        assert np.all(np.diag(red.A) < 0.0)

    def test_eigenvalues_negative_random(self):
        for seed in range(8):
            topo, supply, draws = random_flow_case(seed)
            sol = solve_flow_split(topo, supply, draws)
            red = reduce_feeding(topo, sol)
            eig = np.linalg.eigvals(red.A)
            assert np.all(eig.real < 0.0)

    def test_steady_state_between_ambient_and_supply(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        red = reduce_feeding(two_user, sol)
        temps = red.steady_state(80.0, -5.0)
        assert np.all(temps < 80.0) and np.all(temps > -5.0)
