"""Automatic assembly of the network state-space model.

State order is [split feeding headers | user blocks | split return headers];
a user block is (F, S1, S2, S3, R) plus B for leaf users. Inputs are the
supply temperature (B matrix); disturbances are the ambient temperature and
one heat-demand column per user (E matrix). Each row integrates one lumped
energy balance

    dT/dt = c1*(T_in - T) - c2*(T - T_amb)          c1 = mdot/(rho V)
                                                     c2 = hA_s/(rho cp V)

except heat-exchanger rows (S2), whose loss term is the building demand
c4*Qb with c4 = -1/(rho cp V). Rows fed by several streams (return mixers)
weight each incoming temperature by its share of the total return flow, so a
uniform temperature with zero demand is an exact equilibrium of the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import sparse

from .hydraulics import MassFlowSolution
from .topology import (PLANT, BuildingParams, FluidProps, NetworkTopology,
                       NodeSets, PipeParams, SplitNode, UserNode, node_sets)


@dataclass(frozen=True)
class ThermalCoeffs:
    """Energy-balance coefficients of one segment at a given flow."""

    c1: float   # 1/s, advection
    c2: float   # 1/s, loss to surroundings
    c3: float   # 1/s, diagonal term -(c1 + c2)
    c4: float   # K/(J), demand coupling -1/(rho cp V)


def thermal_coeffs(pipe: PipeParams, m_dot: float,
                   fluid: FluidProps) -> ThermalCoeffs:
    if m_dot < 0:
        raise ValueError("negative mass flow")
    c1 = m_dot / (fluid.rho * pipe.volume)
    c2 = pipe.hA_s / (fluid.rho * fluid.cp * pipe.volume)
    return ThermalCoeffs(c1=c1, c2=c2, c3=-(c1 + c2),
                         c4=-1.0 / (fluid.rho * fluid.cp * pipe.volume))


def user_block(user: UserNode, flows: Mapping[str, float],
               fluid: FluidProps) -> tuple[np.ndarray, np.ndarray]:
    """Build one user's state block (5x5, or 6x6 with bypass) and its
    disturbance block (ambient column, demand column).

    ``flows`` carries the segment flows keyed "F", "U" (valve draw through
    S1..S3), "B" (bypass, leaf users) and "R". Mixing ratios into the return
    line use U/R and B/R; a zero return flow transports nothing, so the
    ratios are defined as zero in that case.
    """
    m_f, m_u, m_r = flows["F"], flows["U"], flows["R"]
    has_bypass = user.bypass is not None
    cf = thermal_coeffs(user.feeding, m_f, fluid)
    c_s1 = thermal_coeffs(user.s1, m_u, fluid)
    c_s2 = thermal_coeffs(user.s2, m_u, fluid)
    c_s3 = thermal_coeffs(user.s3, m_u, fluid)
    cr = thermal_coeffs(user.ret, m_r, fluid)
    ratio_u = m_u / m_r if m_r > 0 else 0.0

    n = 6 if has_bypass else 5
    a = np.zeros((n, n))
    a[0, 0] = cf.c3
    a[1, 0] = c_s1.c1
    a[1, 1] = c_s1.c3
    a[2, 1] = c_s2.c1
    a[2, 2] = -c_s2.c1          # demand replaces the ambient loss on S2
    a[3, 2] = c_s3.c1
    a[3, 3] = c_s3.c3
    a[4, 3] = ratio_u * cr.c1
    a[4, 4] = cr.c3

    e = np.zeros((n, 2))
    e[:, 0] = [cf.c2, c_s1.c2, 0.0, c_s3.c2, cr.c2] + ([0.0] if has_bypass else [])
    e[2, 1] = c_s2.c4

    if has_bypass:
        m_b = flows["B"]
        cb = thermal_coeffs(user.bypass, m_b, fluid)
        ratio_b = m_b / m_r if m_r > 0 else 0.0
        a[4, 5] = ratio_b * cr.c1
        a[5, 0] = cb.c1
        a[5, 5] = cb.c3
        e[5, 0] = cb.c2
    return a, e


@dataclass(frozen=True)
class StateSpaceModel:
    """Assembled network model dx/dt = A x + B [T0] + E [Tamb, Qb...].

    Matrices are stored sparse; ``labels`` names each state row
    ("F:3", "S1:1", ..., "Tb:1" once buildings are appended) and ``index``
    maps (node, segment) to its row.
    """

    A: sparse.csr_matrix
    B: sparse.csr_matrix
    E: sparse.csr_matrix
    labels: tuple[str, ...]
    index: Mapping[tuple[int, str], int]
    user_ids: tuple[int, ...]   # E demand-column order (column 1 + i)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def a_dense(self) -> np.ndarray:
        return self.A.toarray()

    def b_dense(self) -> np.ndarray:
        return self.B.toarray()

    def e_dense(self) -> np.ndarray:
        return self.E.toarray()

    def row(self, node: int, segment: str) -> int:
        return self.index[(node, segment)]


def _state_layout(topology: NetworkTopology, sets: NodeSets,
                  buildings: bool = False):
    labels: list[str] = []
    index: dict[tuple[int, str], int] = {}

    def add(node: int, seg: str):
        index[(node, seg)] = len(labels)
        labels.append(f"{seg}:{node}")

    for s in sets.splits:
        add(s, "F")
    for u in sets.users:
        for seg in ("F", "S1", "S2", "S3", "R"):
            add(u, seg)
        if u in sets.leaves:
            add(u, "B")
    for s in sets.splits:
        add(s, "R")
    if buildings:
        for u in sets.users:
            add(u, "Tb")
    return tuple(labels), index


class ModelBuilder:
    """Reusable dense assembler for one topology.

    Splitting layout work from numeric fill keeps repeated assembly cheap
    when simulations rebuild the matrices as flows change.
    """

    def __init__(self, topology: NetworkTopology, *,
                 buildings: Mapping[int, BuildingParams] | None = None,
                 sets: NodeSets | None = None):
        self.topology = topology
        self.sets = sets if sets is not None else node_sets(topology)
        self.buildings = dict(buildings) if buildings else None
        if self.buildings is not None:
            missing = [u for u in self.sets.users if u not in self.buildings]
            if missing:
                raise ValueError(f"missing building parameters for users {missing}")
        self.labels, self.index = _state_layout(
            topology, self.sets, buildings=self.buildings is not None)
        self.n_pipe_states = (2 * self.sets.n_splits + 5 * self.sets.n_users
                              + len(self.sets.leaves))

    def matrices(self, flows: MassFlowSolution):
        """Dense (A, B, E) for the given flow solution."""
        topo, sets = self.topology, self.sets
        fluid = topo.fluid
        idx = self.index
        n_u = sets.n_users
        n = len(self.labels)
        A = np.zeros((n, n))
        B = np.zeros((n, 1))
        E = np.zeros((n, 1 + n_u))
        col_of_user = {u: 1 + i for i, u in enumerate(sets.users)}

        for u in sets.users:
            node = topo.nodes[u]
            seg_flows = {"F": flows.feeding[u], "U": flows.user_draw[u],
                         "R": flows.ret[u]}
            if node.bypass is not None:
                seg_flows["B"] = flows.bypass[u]
            a_blk, e_blk = user_block(node, seg_flows, fluid)
            r0 = idx[(u, "F")]
            k = a_blk.shape[0]
            A[r0:r0 + k, r0:r0 + k] = a_blk
            E[r0:r0 + k, 0] = e_blk[:, 0]
            E[r0:r0 + k, col_of_user[u]] = e_blk[:, 1]

            par = sets.parent[u]
            cf1 = thermal_coeffs(node.feeding, flows.feeding[u], fluid).c1
            if par == PLANT:
                B[r0, 0] = cf1
            else:
                # fed by the parent's feeding line, split and user alike
                A[r0, idx[(par, "F")]] = cf1
            # Downstream returns mix into this user's return line.
            cr1 = thermal_coeffs(node.ret, flows.ret[u], fluid).c1
            m_r = flows.ret[u]
            for child in sets.children.get(u, ()):
                share = flows.ret[child] / m_r if m_r > 0 else 0.0
                A[idx[(u, "R")], idx[(child, "R")]] = share * cr1

        for s in sets.splits:
            node = topo.nodes[s]
            cf = thermal_coeffs(node.feeding, flows.feeding[s], fluid)
            cr = thermal_coeffs(node.ret, flows.ret[s], fluid)
            rf, rr = idx[(s, "F")], idx[(s, "R")]
            A[rf, rf] = cf.c3
            A[rr, rr] = cr.c3
            E[rf, 0] = cf.c2
            E[rr, 0] = cr.c2
            par = sets.parent[s]
            if par == PLANT:
                B[rf, 0] = cf.c1
            else:
                A[rf, idx[(par, "F")]] = cf.c1
            m_r = flows.ret[s]
            for child in sets.children[s]:
                share = flows.ret[child] / m_r if m_r > 0 else 0.0
                A[rr, idx[(child, "R")]] = share * cr.c1

        if self.buildings is not None:
            for i, u in enumerate(sets.users):
                _couple_building(A, E, idx[(u, "S2")], idx[(u, "Tb")], 1 + i,
                                 self.buildings[u])
        return A, B, E


def _couple_building(A: np.ndarray, E: np.ndarray, s2: int, row: int,
                     col: int, b: BuildingParams):
    """Replace the external demand on an S2 row by the linear coupling to a
    building state and fill the building's own energy balance."""
    c4 = E[s2, col]
    A[s2, s2] += c4 * b.hA_s_hex
    A[s2, row] = -c4 * b.hA_s_hex
    A[row, s2] = b.hA_s_hex / b.thermal_capacity
    A[row, row] = -(b.hA_s_hex + b.hA_s_env) / b.thermal_capacity
    E[row, 0] = b.hA_s_env / b.thermal_capacity
    E[s2, col] = 0.0


def assemble(topology: NetworkTopology, flows: MassFlowSolution, *,
             sets: NodeSets | None = None) -> StateSpaceModel:
    """Assemble the full sparse state-space model from topology and flows."""
    builder = ModelBuilder(topology, sets=sets)
    A, B, E = builder.matrices(flows)
    return StateSpaceModel(
        A=sparse.csr_matrix(A), B=sparse.csr_matrix(B), E=sparse.csr_matrix(E),
        labels=builder.labels, index=dict(builder.index),
        user_ids=builder.sets.users)


def append_buildings(model: StateSpaceModel,
                     buildings: Mapping[int, BuildingParams]) -> StateSpaceModel:
    """Append one building temperature state per user.

    The heat demand of each building becomes the coupled linear term
    hA_hex*(T_S2 - T_b), so the corresponding demand column of E is zeroed;
    the ambient column gains the envelope loss of each building.
    """
    missing = [u for u in model.user_ids if u not in buildings]
    if missing:
        raise ValueError(f"missing building parameters for users {missing}")
    n = model.n_states
    nb = len(model.user_ids)
    A = np.zeros((n + nb, n + nb))
    A[:n, :n] = model.a_dense()
    B = np.vstack([model.b_dense(), np.zeros((nb, 1))])
    E = np.vstack([model.e_dense(), np.zeros((nb, model.E.shape[1]))])
    labels = list(model.labels)
    index = dict(model.index)
    for i, u in enumerate(model.user_ids):
        row = n + i
        _couple_building(A, E, model.row(u, "S2"), row, 1 + i, buildings[u])
        index[(u, "Tb")] = row
        labels.append(f"Tb:{u}")
    return StateSpaceModel(
        A=sparse.csr_matrix(A), B=sparse.csr_matrix(B), E=sparse.csr_matrix(E),
        labels=tuple(labels), index=index, user_ids=model.user_ids)


@dataclass(frozen=True)
class ReducedModel:
    """Feeding-line-only model used for steady-state design costs.

    States are the feeding temperatures of all splits then all users; with
    nodes ordered parents-first the matrix is lower triangular with strictly
    negative diagonal, hence invertible.
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    labels: tuple[str, ...]

    def steady_state(self, supply_temperature: float,
                     ambient_temperature: float) -> np.ndarray:
        rhs = -(self.B[:, 0] * supply_temperature
                + self.E[:, 0] * ambient_temperature)
        return np.linalg.solve(self.A, rhs)


def reduce_feeding(topology: NetworkTopology, flows: MassFlowSolution, *,
                   sets: NodeSets | None = None) -> ReducedModel:
    """Drop the S1, S2, S3, R (and B) states, keeping only feeding lines.

    Feeding temperatures never depend on the discarded states, so deleting
    their rows and columns is exact.
    """
    if sets is None:
        sets = node_sets(topology)
    model = assemble(topology, flows, sets=sets)
    keep = [model.row(s, "F") for s in sets.splits]
    keep += [model.row(u, "F") for u in sets.users]
    A = model.a_dense()[np.ix_(keep, keep)]
    B = model.b_dense()[keep, :]
    E = model.e_dense()[keep, :1]
    labels = tuple(model.labels[i] for i in keep)
    return ReducedModel(A=A, B=B, E=E, labels=labels)
