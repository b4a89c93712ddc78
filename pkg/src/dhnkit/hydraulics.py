"""Pressure losses and the implicit mass-flow split at split nodes.

Pressure loss in a segment is quadratic in flow, dP = zeta * mdot^2. A
branch is a chain of users leaving a split node; it either ends in a leaf
user with a bypass (parallel) or in another split node (series). The loss
over a branch of n users folds the control-valve pressure balances into the
closed form

    dP(n) = sum_{i=0..n-1} 2^i * zeta_F[i] * (m_in - d[0] - ... - d[i-1])^2 + phi

with users ordered head (nearest the split) to tail, and

    phi = 2^n * zeta_B * (m_in - sum d)^2                      (parallel)
    phi = 2^n * (zeta_F_term * m_out^2 + sum dP_downstream)    (series)

Split fractions alpha are solved so that all branches leaving a split node
see the same pressure drop while flows are conserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import FlowSolveError
from .topology import (PLANT, NetworkTopology, NodeSets, SplitNode, UserNode,
                       node_sets)


def segment_dp(zeta: float, m_dot: float) -> float:
    """Static pressure loss zeta * mdot^2 [Pa] of a single segment."""
    if m_dot < 0:
        raise ValueError(f"negative mass flow {m_dot}")
    return zeta * m_dot * m_dot


@dataclass(frozen=True)
class BranchSpec:
    """Loss coefficients of one branch, users ordered head -> tail.

    Parallel branches carry ``bypass_zeta`` of the terminating leaf user;
    series branches carry ``terminal_zeta`` of the feeding header of the
    split node they end in.
    """

    kind: str                              # "parallel" | "series"
    feeding_zeta: tuple[float, ...]        # zeta_F per user, head -> tail
    bypass_zeta: float | None = None
    terminal_zeta: float | None = None

    def __post_init__(self):
        if self.kind not in ("parallel", "series"):
            raise ValueError(f"unknown branch kind {self.kind!r}")
        if self.kind == "parallel" and self.bypass_zeta is None:
            raise ValueError("parallel branch needs bypass_zeta")
        if self.kind == "series" and self.terminal_zeta is None:
            raise ValueError("series branch needs terminal_zeta")

    @property
    def n_users(self) -> int:
        return len(self.feeding_zeta)


def branch_dp(branch: BranchSpec, m_in: float, user_draws: Sequence[float],
              downstream_dp: Sequence[float] = ()) -> float:
    """Closed-form pressure loss of a branch [Pa].

    ``user_draws`` follows the head -> tail order of the branch users; for a
    series branch ``downstream_dp`` holds the already-evaluated losses of the
    branches leaving the terminating split node.
    """
    n = branch.n_users
    if len(user_draws) != n:
        raise ValueError("one draw per branch user required")
    total = 0.0
    flow = float(m_in)
    weight = 1.0
    for i in range(n):
        # flow past user i-1: m_in minus the draws of users upstream of i
        total += weight * branch.feeding_zeta[i] * flow * flow
        flow -= user_draws[i]
        weight *= 2.0
    remainder = flow  # m_in - sum(draws)
    if branch.kind == "parallel":
        total += weight * branch.bypass_zeta * remainder * remainder
    else:
        total += weight * (branch.terminal_zeta * remainder * remainder
                           + float(sum(downstream_dp)))
    return total


@dataclass(frozen=True)
class MassFlowSolution:
    """Per-segment flows [kg/s] and split fractions alpha per split node.

    ``alpha[s]`` is ordered like the sorted children of split ``s``. The
    return flow of every node equals its feeding flow (symmetric network).
    """

    supply: float
    feeding: Mapping[int, float]        # flow entering each node's F segment
    user_draw: Mapping[int, float]      # flow through S1..S3 per user
    bypass: Mapping[int, float]         # per leaf user
    ret: Mapping[int, float]            # flow through each node's R segment
    alpha: Mapping[int, tuple[float, ...]]

    def segment_flow(self, node: int, segment: str) -> float:
        if segment == "F":
            return self.feeding[node]
        if segment in ("S1", "S2", "S3"):
            return self.user_draw[node]
        if segment == "R":
            return self.ret[node]
        if segment == "B":
            return self.bypass[node]
        raise KeyError(segment)

    def mass_residual(self, sets: NodeSets) -> float:
        """Largest conservation defect across users and splits [kg/s]."""
        worst = 0.0
        for u in sets.users:
            inflow = self.user_draw[u] + self.bypass.get(u, 0.0) \
                + sum(self.ret[c] for c in sets.children.get(u, ()))
            worst = max(worst, abs(self.ret[u] - inflow))
        for s in sets.splits:
            worst = max(worst, abs(self.feeding[s]
                                   - sum(self.feeding[c]
                                         for c in sets.children[s])))
            worst = max(worst, abs(self.ret[s]
                                   - sum(self.ret[c]
                                         for c in sets.children[s])))
        return worst


@dataclass(frozen=True)
class _Branch:
    """Topology-level branch: the user chain behind one split out-edge."""

    head: int                      # first node of the branch (child of the split)
    users: tuple[int, ...]         # chain of users, head -> tail
    terminal: int | None           # terminating split node, None for parallel
    spec: BranchSpec


class _FlowPlan:
    """Cached branch decomposition of a topology for repeated solves."""

    def __init__(self, topology: NetworkTopology, sets: NodeSets):
        self.topology = topology
        self.sets = sets
        roots = sets.children.get(PLANT, ())
        if len(roots) != 1:
            raise FlowSolveError(
                "flow solving expects exactly one pipe out of the plant; "
                f"found {len(roots)}")
        self.root = roots[0]
        self.branches: dict[int, tuple[_Branch, ...]] = {}
        for s in sets.splits:
            self.branches[s] = tuple(self._walk(c) for c in sets.children[s])
        # Unknown vector layout: alpha for every split, children order.
        self.slices: dict[int, slice] = {}
        pos = 0
        for s in sets.splits:
            d = len(sets.children[s])
            self.slices[s] = slice(pos, pos + d)
            pos += d
        self.n_unknowns = pos

    def _walk(self, head: int) -> _Branch:
        nodes = self.topology.nodes
        users: list[int] = []
        cur = head
        while isinstance(nodes[cur], UserNode):
            users.append(cur)
            kids = self.sets.children.get(cur, ())
            if not kids:
                byp = nodes[cur].bypass
                spec = BranchSpec(
                    "parallel",
                    tuple(nodes[u].feeding.zeta for u in users),
                    bypass_zeta=byp.zeta)
                return _Branch(head, tuple(users), None, spec)
            cur = kids[0]
        # cur is a split node: series branch (possibly with zero users)
        spec = BranchSpec(
            "series",
            tuple(nodes[u].feeding.zeta for u in users),
            terminal_zeta=nodes[cur].feeding.zeta)
        return _Branch(head, tuple(users), cur, spec)

    def split_inflows(self, m0: float, draws: Mapping[int, float],
                      alpha: np.ndarray) -> dict[int, float]:
        """Flow arriving at each split's feeding header for the given alpha."""
        inflow: dict[int, float] = {}

        def down(node: int, flow: float):
            while isinstance(self.topology.nodes[node], UserNode):
                flow -= draws[node]
                kids = self.sets.children.get(node, ())
                if not kids:
                    return
                node = kids[0]
            inflow[node] = flow
            a = alpha[self.slices[node]]
            for j, child in enumerate(self.sets.children[node]):
                down(child, a[j] * flow)

        down(self.root, m0)
        return inflow

    def branch_pressure(self, split: int, j: int, draws: Mapping[int, float],
                        alpha: np.ndarray, inflow: Mapping[int, float]) -> float:
        """Pressure loss of out-branch j of ``split`` at the current iterate,
        evaluating nested splits depth-first."""
        br = self.branches[split][j]
        a = alpha[self.slices[split]]
        m_in = a[j] * inflow[split]
        d = [draws[u] for u in br.users]
        if br.terminal is None:
            return branch_dp(br.spec, m_in, d)
        downstream = [self.branch_pressure(br.terminal, k, draws, alpha, inflow)
                      for k in range(len(self.branches[br.terminal]))]
        return branch_dp(br.spec, m_in, d, downstream)

    def residual(self, m0: float, draws: Mapping[int, float],
                 alpha: np.ndarray) -> tuple[np.ndarray, float]:
        """Stacked residual (pressure balances then sum-alpha) and the
        pressure scale used for relative convergence."""
        inflow = self.split_inflows(m0, draws, alpha)
        rows: list[float] = []
        scale = 0.0
        for s in self.sets.splits:
            dps = [self.branch_pressure(s, j, draws, alpha, inflow)
                   for j in range(len(self.branches[s]))]
            scale = max(scale, *(abs(p) for p in dps))
            rows.extend(dps[0] - p for p in dps[1:])
            rows.append(float(np.sum(alpha[self.slices[s]])) - 1.0)
        return np.asarray(rows), scale


def _segment_flows(plan: _FlowPlan, m0: float, draws: Mapping[int, float],
                   alpha: np.ndarray) -> MassFlowSolution:
    sets = plan.sets
    nodes = plan.topology.nodes
    feeding: dict[int, float] = {}
    bypass: dict[int, float] = {}

    def down(node: int, flow: float):
        feeding[node] = flow
        if isinstance(nodes[node], UserNode):
            rest = flow - draws[node]
            kids = sets.children.get(node, ())
            if kids:
                down(kids[0], rest)
            else:
                bypass[node] = rest
        else:
            a = alpha[plan.slices[node]]
            for j, child in enumerate(sets.children[node]):
                down(child, a[j] * flow)

    down(plan.root, m0)
    low = min(bypass.values(), default=0.0)
    if low < -1e-9 * max(m0, 1.0):
        worst = min(bypass, key=bypass.get)
        raise FlowSolveError(
            f"infeasible draws: bypass flow {bypass[worst]:.3e} kg/s at "
            f"user {worst}")
    bypass = {u: max(v, 0.0) for u, v in bypass.items()}
    alphas = {s: tuple(float(a) for a in alpha[plan.slices[s]])
              for s in sets.splits}
    return MassFlowSolution(
        supply=m0,
        feeding=feeding,
        user_draw={u: float(draws[u]) for u in sets.users},
        bypass=bypass,
        ret=dict(feeding),
        alpha=alphas,
    )


def solve_flow_split(topology: NetworkTopology, supply_flow: float,
                     user_draws: Mapping[int, float], *,
                     rel_tol: float = 1e-9, max_iter: int = 100,
                     initial_alpha: Mapping[int, Sequence[float]] | None = None,
                     sets: NodeSets | None = None,
                     plan: _FlowPlan | None = None) -> MassFlowSolution:
    """Solve the split fractions so every split node is pressure balanced.

    Damped Newton iteration on the stacked residual with all alpha as
    unknowns, uniform initial guess, values clamped to [0, 1]; falls back to
    per-split bisection sweeps when every split is two-way.
    """
    if plan is None:
        if sets is None:
            sets = node_sets(topology)
        plan = _FlowPlan(topology, sets)
    sets = plan.sets
    missing = [u for u in sets.users if u not in user_draws]
    if missing:
        raise FlowSolveError(f"missing user draws for {missing}")
    for u in sets.users:
        if user_draws[u] < 0:
            raise FlowSolveError(f"negative draw at user {u}")

    if plan.n_unknowns == 0:
        return _segment_flows(plan, supply_flow, user_draws, np.empty(0))

    x = np.empty(plan.n_unknowns)
    for s in sets.splits:
        d = len(sets.children[s])
        if initial_alpha is not None and s in initial_alpha:
            x[plan.slices[s]] = np.clip(initial_alpha[s], 0.0, 1.0)
        else:
            x[plan.slices[s]] = 1.0 / d

    def converged(res: np.ndarray, scale: float) -> bool:
        p_rows = _pressure_rows(plan, res)
        tol = rel_tol * max(scale, 1e-300)
        return (np.all(np.abs(res[p_rows]) <= tol)
                and np.all(np.abs(res[~p_rows]) <= 1e-12))

    ok = False
    for _ in range(max_iter):
        res, scale = plan.residual(supply_flow, user_draws, x)
        if converged(res, scale):
            ok = True
            break
        jac = _fd_jacobian(plan, supply_flow, user_draws, x, res)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            break
        norm0 = np.linalg.norm(res)
        t = 1.0
        while t > 1e-6:
            cand = np.clip(x + t * step, 0.0, 1.0)
            r2, _ = plan.residual(supply_flow, user_draws, cand)
            if np.linalg.norm(r2) < norm0:
                x = cand
                break
            t *= 0.5
        else:
            break
    else:
        res, scale = plan.residual(supply_flow, user_draws, x)
        ok = converged(res, scale)

    if not ok:
        res, scale = plan.residual(supply_flow, user_draws, x)
        if converged(res, scale):
            ok = True
    if not ok:
        x = _bisection_fallback(plan, supply_flow, user_draws, x, rel_tol)
        res, scale = plan.residual(supply_flow, user_draws, x)
        if not converged(res, scale):
            raise FlowSolveError(
                f"flow split did not converge: residual {np.max(np.abs(res)):.3e} "
                f"against scale {scale:.3e}")

    # Exact conservation by construction: renormalize each split's fractions.
    for s in sets.splits:
        sl = plan.slices[s]
        x[sl] = x[sl] / np.sum(x[sl])
    return _segment_flows(plan, supply_flow, user_draws, x)


def _pressure_rows(plan: _FlowPlan, res: np.ndarray) -> np.ndarray:
    mask = np.ones(len(res), dtype=bool)
    row = 0
    for s in plan.sets.splits:
        d = len(plan.sets.children[s])
        row += d - 1
        mask[row] = False    # the sum-alpha row of this split
        row += 1
    return mask


def _fd_jacobian(plan: _FlowPlan, m0: float, draws: Mapping[int, float],
                 x: np.ndarray, res0: np.ndarray) -> np.ndarray:
    n = len(x)
    jac = np.empty((n, n))
    for i in range(n):
        h = 1e-7 * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        rp, _ = plan.residual(m0, draws, xp)
        jac[:, i] = (rp - res0) / h
    return jac


def _bisection_fallback(plan: _FlowPlan, m0: float,
                        draws: Mapping[int, float], x: np.ndarray,
                        rel_tol: float) -> np.ndarray:
    """Gauss-Seidel sweeps of 1-D bisection; only for all-two-way splits."""
    sets = plan.sets
    if any(len(sets.children[s]) != 2 for s in sets.splits):
        raise FlowSolveError("flow split did not converge and bisection "
                             "fallback needs two-way splits")
    x = x.copy()
    for _ in range(200):
        for s in sets.splits:
            sl = plan.slices[s]

            def gap(a: float) -> float:
                x[sl] = (a, 1.0 - a)
                inflow = plan.split_inflows(m0, draws, x)
                return (plan.branch_pressure(s, 0, draws, x, inflow)
                        - plan.branch_pressure(s, 1, draws, x, inflow))

            lo, hi = 0.0, 1.0
            glo = gap(lo)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                g = gap(mid)
                if (g > 0) == (glo > 0):
                    lo, glo = mid, g
                else:
                    hi = mid
            x[sl] = (0.5 * (lo + hi), 1.0 - 0.5 * (lo + hi))
        res, scale = plan.residual(m0, draws, x)
        p = _pressure_rows(plan, res)
        if np.all(np.abs(res[p]) <= rel_tol * max(scale, 1e-300)):
            break
    return x


def ideal_flow_split(topology: NetworkTopology, supply_flow: float, *,
                     sets: NodeSets | None = None) -> MassFlowSolution:
    """Flows of an ideally pressure-balanced network: every user receives the
    same share and each segment carries its downstream-user fraction of the
    supply flow."""
    if sets is None:
        sets = node_sets(topology)
    n_u = sets.n_users
    share = supply_flow / n_u

    counts: dict[int, int] = {}

    def count(node: int) -> int:
        own = 1 if isinstance(topology.nodes[node], UserNode) else 0
        counts[node] = own + sum(count(c) for c in sets.children.get(node, ()))
        return counts[node]

    for c in sets.children.get(PLANT, ()):
        count(c)

    feeding = {n: counts[n] * share for n in counts}
    alpha = {}
    for s in sets.splits:
        kids = sets.children[s]
        alpha[s] = tuple(counts[c] / counts[s] for c in kids)
    return MassFlowSolution(
        supply=supply_flow,
        feeding=feeding,
        user_draw={u: share for u in sets.users},
        bypass={u: feeding[u] - share for u in sets.leaves},
        ret=dict(feeding),
        alpha=alpha,
    )
