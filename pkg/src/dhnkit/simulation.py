"""Discrete-time simulation of the network model.

The continuous model is discretized with the bilinear (Tustin) transform and
stepped with zero-order-hold inputs. Flows may vary over time: whenever any
segment flow moves by more than 0.1% relative, the state matrices are
re-assembled and re-discretized; otherwise the cached discrete matrices are
reused. Closed-loop runs drive each user's valve flow with a PID controller
on the building temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .assembly import ModelBuilder
from .errors import FlowSolveError, SimulationError
from .hydraulics import MassFlowSolution, _FlowPlan, solve_flow_split
from .topology import NetworkTopology, NodeSets, node_sets

# Relative segment-flow change that triggers re-assembly + re-discretization.
FLOW_REBUILD_RTOL = 1e-3


@dataclass
class Scenario:
    """Time series driving one simulation; all series share the horizon.

    Per user, either a heat-demand series (open loop) or a setpoint series
    (closed loop) is given. Open-loop runs also need the valve draws. The
    optional ``measured`` map carries reference traces keyed by state label
    for calibration and validation.
    """

    dt: float
    supply_temperature: np.ndarray          # T0(t)
    ambient_temperature: np.ndarray         # Tamb(t)
    supply_flow: np.ndarray                 # mdot0(t), kg/s
    user_draws: Mapping[int, np.ndarray] | None = None
    heat_demands: Mapping[int, np.ndarray] | None = None   # Qb(t), W
    setpoints: Mapping[int, np.ndarray] | None = None      # Tset(t)
    measured: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        self.supply_temperature = np.asarray(self.supply_temperature, float)
        self.ambient_temperature = np.asarray(self.ambient_temperature, float)
        self.supply_flow = np.asarray(self.supply_flow, float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        n = self.horizon
        series = [self.ambient_temperature, self.supply_flow]
        for group in (self.user_draws, self.heat_demands, self.setpoints,
                      self.measured):
            if group:
                series.extend(np.asarray(v, float) for v in group.values())
        if any(len(s) != n for s in series):
            raise ValueError("all scenario series must share the horizon")

    @property
    def horizon(self) -> int:
        return len(self.supply_temperature)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.horizon + 1) * self.dt


@dataclass(frozen=True)
class PidConfig:
    """Per-user PID gains and actuator limits for the valve flow.

    Scalars broadcast over all users. Integration is clamped: the integral
    state freezes while the output saturates in the direction of the error.
    """

    kp: float | Mapping[int, float]
    ki: float | Mapping[int, float] = 0.0
    kd: float | Mapping[int, float] = 0.0
    m_min: float | Mapping[int, float] = 0.0
    m_max: float | Mapping[int, float] = np.inf

    def per_user(self, users: tuple[int, ...]):
        def expand(v):
            if isinstance(v, Mapping):
                return np.array([float(v[u]) for u in users])
            return np.full(len(users), float(v))
        return (expand(self.kp), expand(self.ki), expand(self.kd),
                expand(self.m_min), expand(self.m_max))


class PidController:
    """Vectorized PID with output clamping and clamped integration."""

    def __init__(self, config: PidConfig, users: tuple[int, ...], dt: float):
        self.kp, self.ki, self.kd, self.m_min, self.m_max = \
            config.per_user(users)
        if np.any(self.m_min < 0):
            raise ValueError("m_min must be non-negative")
        self.dt = dt
        self.integral = np.zeros(len(users))
        self.prev_error: np.ndarray | None = None

    def step(self, error: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        deriv = np.zeros_like(error) if self.prev_error is None \
            else (error - self.prev_error) / self.dt
        raw = (self.kp * error + self.ki * (self.integral + error * self.dt)
               + self.kd * deriv)
        out = np.clip(raw, self.m_min, self.m_max)
        saturated = (raw != out)
        # freeze the integral when pushing further into saturation
        hold = saturated & (np.sign(error) == np.sign(raw - out))
        self.integral = np.where(hold, self.integral,
                                 self.integral + error * self.dt)
        self.prev_error = error
        return out, saturated


@dataclass
class SimResult:
    """Trajectories of one run; rows of ``states`` follow ``times``."""

    times: np.ndarray                 # (horizon + 1,)
    labels: tuple[str, ...]
    states: np.ndarray                # (horizon + 1, n_states)
    user_ids: tuple[int, ...]
    user_flows: np.ndarray            # (horizon, n_users), applied draws
    saturated: np.ndarray             # (horizon, n_users) bool
    diagnostics: dict = field(default_factory=dict)

    def series(self, label: str) -> np.ndarray:
        return self.states[:, self.labels.index(label)]


def discretize_bilinear(A: np.ndarray, B: np.ndarray, E: np.ndarray,
                        dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear (Tustin) discretization with zero-order-hold inputs:
    Ad = (I - dt/2 A)^-1 (I + dt/2 A),  Bd/Ed = (I - dt/2 A)^-1 dt B/E."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A = np.asarray(A, float)
    B = np.atleast_2d(np.asarray(B, float))
    E = np.atleast_2d(np.asarray(E, float))
    n = A.shape[0]
    lhs = np.eye(n) - 0.5 * dt * A
    rhs = np.hstack([np.eye(n) + 0.5 * dt * A, dt * B, dt * E])
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("(I - dt/2 A) is singular; reduce dt") from exc
    nb = B.shape[1]
    return sol[:, :n], sol[:, n:n + nb], sol[:, n + nb:]


class _SteppedModel:
    """Shared stepping engine: flow solve, cached discretization, advance."""

    def __init__(self, topology: NetworkTopology, scenario: Scenario,
                 couple_buildings: bool, sets: NodeSets | None):
        self.topology = topology
        self.scenario = scenario
        self.sets = sets if sets is not None else node_sets(topology)
        buildings = None
        if couple_buildings:
            buildings = {u: topology.nodes[u].building for u in self.sets.users}
            missing = [u for u, b in buildings.items() if b is None]
            if missing:
                raise SimulationError(
                    f"users {missing} have no building parameters")
        self.builder = ModelBuilder(topology, buildings=buildings,
                                    sets=self.sets)
        self.plan = _FlowPlan(topology, self.sets)
        self.alpha_prev: dict | None = None
        self.flow_vec: np.ndarray | None = None
        self.discrete = None
        self.rebuilds = 0
        self._flow_inputs = None
        self._flow_cached = None

    def solve_flows(self, m0: float, draws: dict[int, float],
                    step: int) -> MassFlowSolution:
        inputs = (m0, tuple(sorted(draws.items())))
        if inputs == self._flow_inputs:
            return self._flow_cached
        try:
            sol = solve_flow_split(self.topology, m0, draws,
                                   plan=self.plan,
                                   initial_alpha=self.alpha_prev)
        except FlowSolveError as exc:
            raise SimulationError(str(exc), step=step) from exc
        self.alpha_prev = dict(sol.alpha)
        self._flow_inputs = inputs
        self._flow_cached = sol
        return sol

    def matrices_for(self, sol: MassFlowSolution, dt: float):
        vec = np.array([sol.feeding[n] for n in sorted(sol.feeding)]
                       + [sol.user_draw[u] for u in self.sets.users]
                       + [sol.bypass[u] for u in sorted(sol.bypass)])
        if self.flow_vec is not None and self.discrete is not None:
            ref = np.maximum(np.abs(self.flow_vec), 1e-12)
            if np.all(np.abs(vec - self.flow_vec) <= FLOW_REBUILD_RTOL * ref):
                return self.discrete
        A, B, E = self.builder.matrices(sol)
        self.discrete = discretize_bilinear(A, B, E, dt)
        self.flow_vec = vec
        self.rebuilds += 1
        return self.discrete


def _initial_state(x0, n, fallback: float) -> np.ndarray:
    if x0 is None:
        return np.full(n, fallback)
    x = np.asarray(x0, float)
    if x.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    return x.copy()


def simulate(topology: NetworkTopology, scenario: Scenario, *,
             x0: np.ndarray | None = None, couple_buildings: bool = False,
             sets: NodeSets | None = None) -> SimResult:
    """Open-loop run: valve draws (and heat demands) come from the scenario.

    With ``couple_buildings`` the building states are part of the model and
    the demand columns are inactive; otherwise demands default to zero.
    """
    if scenario.user_draws is None:
        raise SimulationError("open-loop simulation needs scenario.user_draws")
    eng = _SteppedModel(topology, scenario, couple_buildings, sets)
    users = eng.sets.users
    n = len(eng.builder.labels)
    x = _initial_state(x0, n, scenario.ambient_temperature[0])
    steps = scenario.horizon
    states = np.empty((steps + 1, n))
    states[0] = x
    flows_applied = np.empty((steps, len(users)))
    d = np.zeros(1 + len(users))
    for k in range(steps):
        draws = {u: float(scenario.user_draws[u][k]) for u in users}
        sol = eng.solve_flows(float(scenario.supply_flow[k]), draws, k)
        ad, bd, ed = eng.matrices_for(sol, scenario.dt)
        d[0] = scenario.ambient_temperature[k]
        if scenario.heat_demands is not None and not couple_buildings:
            for i, u in enumerate(users):
                d[1 + i] = scenario.heat_demands[u][k]
        x = ad @ x + bd[:, 0] * scenario.supply_temperature[k] + ed @ d
        states[k + 1] = x
        flows_applied[k] = [draws[u] for u in users]
    return SimResult(
        times=scenario.times, labels=eng.builder.labels, states=states,
        user_ids=users, user_flows=flows_applied,
        saturated=np.zeros((steps, len(users)), dtype=bool),
        diagnostics={"matrix_rebuilds": eng.rebuilds})


def simulate_closed_loop(topology: NetworkTopology, scenario: Scenario,
                         pid: PidConfig, *, x0: np.ndarray | None = None,
                         mode: str = "setpoint",
                         sets: NodeSets | None = None) -> SimResult:
    """Closed-loop run with buildings coupled and PID-driven valve flows.

    ``mode="setpoint"`` controls each building to its setpoint series;
    ``mode="track"`` drives the valves with the gap between a measured
    building trace ("Tb:<user>" in ``scenario.measured``) and the simulated
    one, reproducing validation against recorded data.
    """
    if mode not in ("setpoint", "track"):
        raise ValueError(f"unknown mode {mode!r}")
    eng = _SteppedModel(topology, scenario, True, sets)
    users = eng.sets.users
    if mode == "setpoint":
        if scenario.setpoints is None:
            raise SimulationError("closed loop needs scenario.setpoints")
        targets = np.column_stack([scenario.setpoints[u] for u in users])
    else:
        if not scenario.measured:
            raise SimulationError("track mode needs measured building traces")
        try:
            targets = np.column_stack(
                [scenario.measured[f"Tb:{u}"] for u in users])
        except KeyError as exc:
            raise SimulationError(f"missing measured trace {exc}") from exc

    controller = PidController(pid, users, scenario.dt)
    tb_rows = [eng.builder.index[(u, "Tb")] for u in users]
    n = len(eng.builder.labels)
    x = _initial_state(x0, n, scenario.ambient_temperature[0])
    steps = scenario.horizon
    states = np.empty((steps + 1, n))
    states[0] = x
    flows_applied = np.empty((steps, len(users)))
    saturated = np.empty((steps, len(users)), dtype=bool)
    d = np.zeros(1 + len(users))
    for k in range(steps):
        error = targets[k] - x[tb_rows]
        draws_vec, sat = controller.step(error)
        draws = {u: float(draws_vec[i]) for i, u in enumerate(users)}
        sol = eng.solve_flows(float(scenario.supply_flow[k]), draws, k)
        ad, bd, ed = eng.matrices_for(sol, scenario.dt)
        d[0] = scenario.ambient_temperature[k]
        x = ad @ x + bd[:, 0] * scenario.supply_temperature[k] + ed @ d
        states[k + 1] = x
        flows_applied[k] = draws_vec
        saturated[k] = sat
    return SimResult(
        times=scenario.times, labels=eng.builder.labels, states=states,
        user_ids=users, user_flows=flows_applied, saturated=saturated,
        diagnostics={"matrix_rebuilds": eng.rebuilds,
                     "mode": mode})


def nrmse(simulated: np.ndarray, measured: np.ndarray) -> float:
    """Root-mean-square error normalized by the measured range."""
    sim = np.asarray(simulated, float)
    meas = np.asarray(measured, float)
    if sim.shape != meas.shape or sim.ndim != 1 or len(sim) < 2:
        raise ValueError("series must be 1-D, equal length, and >= 2 samples")
    rng = float(np.max(meas) - np.min(meas))
    if rng <= 0:
        raise ValueError("measured series has zero range")
    return float(np.sqrt(np.mean((sim - meas) ** 2)) / rng)
