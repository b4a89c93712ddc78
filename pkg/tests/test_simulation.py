"""Discretization, open/closed-loop stepping, and the error metric."""

import numpy as np
import pytest

from conftest import (random_flow_case, two_user_network, TWO_USER_BUILDINGS,
                      TWO_USER_DRAWS, TWO_USER_SUPPLY)
from oracles import Rk4Stepper
from dhnkit.assembly import ModelBuilder, append_buildings, assemble
from dhnkit.errors import SimulationError
from dhnkit.hydraulics import solve_flow_split
from dhnkit.simulation import (PidConfig, Scenario, discretize_bilinear,
                               nrmse, simulate, simulate_closed_loop)
from dhnkit.topology import node_sets


def constant_scenario(steps, t0=78.0, tamb=4.0, m0=TWO_USER_SUPPLY,
                      draws=TWO_USER_DRAWS, **kw):
    return Scenario(
        dt=1.0,
        supply_temperature=np.full(steps, t0),
        ambient_temperature=np.full(steps, tamb),
        supply_flow=np.full(steps, m0),
        user_draws={u: np.full(steps, v) for u, v in draws.items()},
        **kw)


class TestDiscretize:
    def test_pure_integrator(self):
        A = np.zeros((2, 2))
        B = np.array([[1.0], [2.0]])
        E = np.zeros((2, 1))
        ad, bd, ed = discretize_bilinear(A, B, E, 0.5)
        np.testing.assert_allclose(ad, np.eye(2))
        np.testing.assert_allclose(bd, 0.5 * B)

    def test_scalar_closed_form(self):
        ad, bd, ed = discretize_bilinear(np.array([[-1.0]]),
                                         np.array([[0.0]]),
                                         np.array([[0.0]]), 1.0)
        assert ad[0, 0] == pytest.approx(1.0 / 3.0)

    def test_singular_rejected(self):
        A = np.array([[2.0]])     # I - dt/2*A = 0 at dt = 1
        with pytest.raises(ValueError):
            discretize_bilinear(A, np.array([[1.0]]), np.array([[0.0]]), 1.0)

    def test_step_response_matches_rk4(self, two_user):
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        model = assemble(two_user, sol)
        A, B, E = model.a_dense(), model.b_dense(), model.e_dense()
        dt = 1.0
        ad, bd, ed = discretize_bilinear(A, B, E, dt)
        x = np.full(A.shape[0], 20.0)
        x_ref = x.copy()
        stepper = Rk4Stepper(dt=dt, substep=0.01)
        d = np.zeros(E.shape[1])
        d[0] = 4.0
        worst = 0.0
        for _ in range(1000):
            x = ad @ x + bd[:, 0] * 78.0 + ed @ d
            x_ref = stepper.advance(x_ref, A, B, E, 78.0, d, flow_key="fixed")
            worst = max(worst, np.max(np.abs(x - x_ref)))
        assert worst < 1e-3


class TestSimulateOpenLoop:
    def test_constant_inputs_reach_steady_state(self, two_user):
        sc = constant_scenario(6000)
        res = simulate(two_user, sc, x0=np.full(14, 20.0))
        sol = solve_flow_split(two_user, TWO_USER_SUPPLY, TWO_USER_DRAWS)
        model = assemble(two_user, sol)
        A, B, E = model.a_dense(), model.b_dense(), model.e_dense()
        xss = np.linalg.solve(A, -(B[:, 0] * 78.0 + E[:, 0] * 4.0))
        assert np.max(np.abs(res.states[-1] - xss)) < 0.01

    def test_uniform_equilibrium_held(self, two_user):
        theta = 41.0
        sc = constant_scenario(200, t0=theta, tamb=theta)
        res = simulate(two_user, sc, x0=np.full(14, theta))
        assert np.max(np.abs(res.states - theta)) < 1e-10

    def test_zero_flow_relaxes_to_ambient(self, two_user):
        sc = constant_scenario(4000, t0=60.0, tamb=5.0, m0=0.0,
                               draws={1: 0.0, 2: 0.0})
        res = simulate(two_user, sc, x0=np.full(14, 60.0))
        # segments losing to the surroundings cool monotonically toward 5 C
        for lab in res.labels:
            if lab.startswith("S2"):
                continue    # heat-exchanger loss is the (zero) demand input
            series = res.series(lab)
            assert np.all(np.diff(series) <= 1e-12)
            assert series[-1] > 5.0

    def test_heat_demand_lowers_exchanger(self, two_user):
        steps = 3000
        sc = constant_scenario(steps)
        res0 = simulate(two_user, sc, x0=np.full(14, 20.0))
        sc_q = constant_scenario(
            steps, heat_demands={1: np.full(steps, 2.0e4),
                                 2: np.zeros(steps)})
        res1 = simulate(two_user, sc_q, x0=np.full(14, 20.0))
        assert res1.series("S2:1")[-1] < res0.series("S2:1")[-1] - 1.0

    def test_missing_draws_rejected(self, two_user):
        sc = Scenario(dt=1.0, supply_temperature=np.full(5, 70.0),
                      ambient_temperature=np.full(5, 0.0),
                      supply_flow=np.full(5, 1.0))
        with pytest.raises(SimulationError):
            simulate(two_user, sc)


class TestSimulateClosedLoop:
    def test_zero_error_keeps_zero_flow(self, two_user):
        steps = 300
        tamb = 12.0
        sc = Scenario(
            dt=1.0,
            supply_temperature=np.full(steps, 70.0),
            ambient_temperature=np.full(steps, tamb),
            supply_flow=np.full(steps, TWO_USER_SUPPLY),
            setpoints={1: np.full(steps, tamb), 2: np.full(steps, tamb)})
        pid = PidConfig(kp=0.05, ki=0.001, m_min=0.0, m_max=0.8)
        res = simulate_closed_loop(two_user, sc, pid,
                                   x0=np.full(16, tamb))
        assert np.max(np.abs(res.user_flows)) == 0.0

    def test_setpoint_step_settles_without_offset(self, two_user):
        steps = 40000
        sc = Scenario(
            dt=1.0,
            supply_temperature=np.full(steps, 75.0),
            ambient_temperature=np.full(steps, 2.0),
            supply_flow=np.full(steps, TWO_USER_SUPPLY),
            setpoints={1: np.full(steps, 19.0), 2: np.full(steps, 18.0)})
        pid = PidConfig(kp=0.03, ki=0.0002, m_min=0.0, m_max=0.8)
        res = simulate_closed_loop(two_user, sc, pid, x0=np.full(16, 10.0))
        assert abs(res.series("Tb:1")[-1] - 19.0) < 0.05
        assert abs(res.series("Tb:2")[-1] - 18.0) < 0.05

    def test_saturation_flagged_and_setpoint_missed(self, two_user):
        steps = 30000
        sc = Scenario(
            dt=1.0,
            supply_temperature=np.full(steps, 75.0),
            ambient_temperature=np.full(steps, 2.0),
            supply_flow=np.full(steps, TWO_USER_SUPPLY),
            setpoints={1: np.full(steps, 30.0), 2: np.full(steps, 18.0)})
        pid = PidConfig(kp=0.03, ki=0.0002, m_min=0.0,
                        m_max={1: 0.05, 2: 0.8})
        res = simulate_closed_loop(two_user, sc, pid, x0=np.full(16, 10.0))
        assert res.series("Tb:1")[-1] < 29.0
        assert res.saturated[-1, 0]
        assert res.user_flows[-1, 0] == pytest.approx(0.05)

    def test_track_mode_follows_measured_building(self, two_user):
        steps = 20000
        t = np.arange(steps)
        meas = 16.0 + 3.0 * np.clip(t / 8000.0, 0.0, 1.0)
        sc = Scenario(
            dt=1.0,
            supply_temperature=np.full(steps, 75.0),
            ambient_temperature=np.full(steps, 2.0),
            supply_flow=np.full(steps, TWO_USER_SUPPLY),
            setpoints=None,
            measured={"Tb:1": meas, "Tb:2": np.full(steps, 16.0)})
        pid = PidConfig(kp=0.05, ki=0.0004, m_min=0.0, m_max=0.8)
        res = simulate_closed_loop(two_user, sc, pid, mode="track",
                                   x0=np.full(16, 16.0))
        assert abs(res.series("Tb:1")[-1] - meas[-1]) < 0.1

    def test_boundedness_with_physical_inputs(self):
        for seed in (1, 4, 7):
            topo, supply, draws = random_flow_case(seed, with_buildings=True)
            steps = 2000
            sc = Scenario(
                dt=1.0,
                supply_temperature=np.full(steps, 70.0),
                ambient_temperature=np.full(steps, 0.0),
                supply_flow=np.full(steps, supply),
                user_draws={u: np.full(steps, v) for u, v in draws.items()})
            res = simulate(topo, sc, x0=np.full(len(
                assemble(topo, solve_flow_split(topo, supply, draws)).labels
            ) + 0, 35.0))
            eps = 1e-6
            assert res.states.min() >= 0.0 - eps
            assert res.states.max() <= 70.0 + eps


class TestNrmse:
    def test_identical_series(self):
        x = np.array([1.0, 2.0, 3.0])
        assert nrmse(x, x) == 0.0

    def test_swapped_unit_series(self):
        assert nrmse(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == \
            pytest.approx(1.0)

    def test_zero_range_rejected(self):
        with pytest.raises(ValueError):
            nrmse(np.array([1.0, 2.0]), np.array([3.0, 3.0]))

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(2)
        sim = rng.normal(size=500)
        meas = sim + rng.normal(scale=0.1, size=500)
        a, b = 3.7, -12.0
        assert nrmse(a * sim + b, a * meas + b) == \
            pytest.approx(nrmse(sim, meas), rel=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            nrmse(np.zeros(3), np.zeros(4))
