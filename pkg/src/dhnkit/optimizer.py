"""Layout design minimizing steady-state enthalpy loss of the supply network.

The search space is built from candidate split nodes generated a priori:
simple nodes join a subset of users directly, complex nodes join other
candidate nodes, and mixed nodes join both. A design tree connects the plant
to units (users or candidates) through directed edges between units with
disjoint prize sets, collecting every user exactly once. Trees are explored
by branch and bound: additive lower-bound costs (steady loss of each pipe
assuming no extra downstream users and a capped inlet temperature drop)
prune against the incumbent's true cost, which comes from the steady state
of the feeding-line model under an ideal flow split. Because the assumed
temperature-drop cap must dominate the real drop for the bounds to be valid,
the whole solve is repeated with a raised cap until it is consistent.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import CandidateLimitError, DesignError

UnitKey = tuple[str, int]
ROOT: UnitKey = ("root", 0)


def format_key(key: UnitKey) -> str:
    kind, num = key
    if kind == "root":
        return "plant"
    if kind == "user":
        return f"user:{num}"
    return f"split:{num}"


@dataclass(frozen=True)
class SiteSpec:
    """Geometry and operating parameters of a design problem."""

    plant: tuple[float, float]
    users: tuple[tuple[float, float], ...]   # positions of users 1..n
    supply_flow: float = 20.0                # kg/s
    rho: float = 971.0                       # kg/m^3
    cp: float = 4179.0                       # J/(kg K)
    supply_temperature: float = 80.0         # C
    ambient_temperature: float = -5.0        # C
    diameter_large: float = 0.40             # m, pipes feeding > 1 user
    diameter_small: float = 0.15             # m, pipes feeding 1 user
    h: float = 1.5                           # W/(m^2 K) per unit pipe surface

    def __post_init__(self):
        object.__setattr__(self, "users",
                           tuple((float(x), float(y)) for x, y in self.users))
        object.__setattr__(self, "plant",
                           (float(self.plant[0]), float(self.plant[1])))
        if self.n_users < 1:
            raise ValueError("at least one user required")
        pts = (self.plant,) + self.users
        if len(set(pts)) != len(pts):
            raise ValueError("plant and user positions must be distinct")

    @property
    def n_users(self) -> int:
        return len(self.users)

    def user_position(self, i: int) -> tuple[float, float]:
        return self.users[i - 1]


@dataclass(frozen=True)
class CandidateNode:
    """One pre-generated split node: its children and collected users."""

    id: int
    kind: str                        # simple | complex | mixed
    position: tuple[float, float]
    children: tuple[UnitKey, ...]
    prize_mask: int
    internal_length: float           # m, total length of the internal pipes

    @property
    def n_prizes(self) -> int:
        return bin(self.prize_mask).count("1")


def count_candidates(n_users: int) -> int:
    """Number of candidate split nodes for n users (no caps), counting every
    way of hierarchically joining each user subset of size >= 2."""
    full = 1 << n_users
    unit = [0] * full      # weight of one block: 1 for singletons, else trees
    trees = [0] * full     # hierarchies over the exact subset
    parts = [0] * full     # partitions (>= 1 block) weighted by unit products
    parts[0] = 1
    for mask in range(1, full):
        low = mask & -mask
        rest_bits = mask ^ low
        t = 0
        sub = rest_bits
        while True:         # blocks containing the lowest element, proper
            block = low | sub
            if block != mask:
                t += unit[block] * parts[mask ^ block]
            if sub == 0:
                break
            sub = (sub - 1) & rest_bits
        trees[mask] = t
        unit[mask] = 1 if mask == low else t
        parts[mask] = t + unit[mask]
    return sum(trees[m] for m in range(full) if m & (m - 1))


def _centroid(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    xs = sum(p[0] for p in points) / len(points)
    ys = sum(p[1] for p in points) / len(points)
    return (xs, ys)


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _set_partitions(mask: int) -> Iterable[list[int]]:
    """Canonical set partitions of the bitmask (first block holds the lowest
    bit), blocks in discovery order."""
    if mask == 0:
        yield []
        return
    low = mask & -mask
    rest = mask ^ low
    subs = []
    sub = rest
    while True:
        subs.append(low | sub)
        if sub == 0:
            break
        sub = (sub - 1) & rest
    for block in sorted(subs):
        for tail in _set_partitions(mask ^ block):
            yield [block] + tail


def generate_candidates(site: SiteSpec, *, max_nodes: int | None = None,
                        combine_radius: float | None = None
                        ) -> tuple[CandidateNode, ...]:
    """Generate every candidate split node, smallest user subsets first.

    ``max_nodes`` caps generation (raises :class:`CandidateLimitError` when
    exceeded); ``combine_radius`` skips candidates whose children lie further
    apart than the given radius.
    """
    n = site.n_users
    if n < 2:
        raise ValueError("candidate generation needs at least two users")
    out: list[CandidateNode] = []
    by_mask: dict[int, list[UnitKey]] = {}
    info: dict[UnitKey, tuple[tuple[float, float], float]] = {}
    for i in range(1, n + 1):
        key = ("user", i)
        by_mask[1 << (i - 1)] = [key]
        info[key] = (site.user_position(i), 0.0)

    masks = sorted(range(1, 1 << n),
                   key=lambda m: (bin(m).count("1"), m))
    for mask in masks:
        if mask & (mask - 1) == 0:
            continue
        for blocks in _set_partitions(mask):
            if len(blocks) < 2:
                continue
            pools = [by_mask.get(b, ()) for b in blocks]
            if any(not p for p in pools):
                continue
            for combo in itertools.product(*pools):
                pts = [info[c][0] for c in combo]
                if combine_radius is not None and len(pts) > 1:
                    spread = max(_dist(p, q)
                                 for p, q in itertools.combinations(pts, 2))
                    if spread > combine_radius:
                        continue
                if max_nodes is not None and len(out) >= max_nodes:
                    raise CandidateLimitError(max_nodes, len(out))
                pos = _centroid(pts)
                kinds = {c[0] for c in combo}
                kind = ("simple" if kinds == {"user"}
                        else "complex" if kinds == {"cand"} else "mixed")
                internal = sum(_dist(pos, info[c][0]) + info[c][1]
                               for c in combo)
                cand = CandidateNode(id=len(out), kind=kind, position=pos,
                                     children=tuple(combo), prize_mask=mask,
                                     internal_length=internal)
                out.append(cand)
                key = ("cand", cand.id)
                by_mask.setdefault(mask, []).append(key)
                info[key] = (pos, internal)
    return tuple(out)


def pipe_steady_loss(length: float, diameter: float, flow: float,
                     inlet_temperature: float, site: SiteSpec) -> float:
    """Steady enthalpy loss [W] of one buried pipe at the given inlet."""
    if length <= 0.0 or flow <= 0.0:
        return 0.0
    volume = math.pi * (diameter / 2.0) ** 2 * length
    c1 = flow / (site.rho * volume)
    c2 = (site.h * math.pi * diameter * length
          / (site.rho * site.cp * volume))
    t_ss = ((c1 * inlet_temperature + c2 * site.ambient_temperature)
            / (c1 + c2))
    return flow * site.cp * (inlet_temperature - t_ss)


def lower_bound_costs(site: SiteSpec, candidates: Sequence[CandidateNode],
                      delta_t: float
                      ) -> tuple[Callable[[UnitKey, UnitKey], float],
                                 dict[UnitKey, float]]:
    """Lower-bound costs for the given temperature-drop cap.

    The edge bound prices the connecting pipe for the child's own prize
    count only (no extra downstream users) at inlet T0 - delta_t; a
    candidate's node bound prices its internal pipes the same way,
    recursively. Users carry no node cost.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    t_in = site.supply_temperature - delta_t
    n_u = site.n_users
    by_id = {c.id: c for c in candidates}

    def position(key: UnitKey) -> tuple[float, float]:
        kind, num = key
        if kind == "root":
            return site.plant
        if kind == "user":
            return site.user_position(num)
        return by_id[num].position

    def prizes(key: UnitKey) -> int:
        return 1 if key[0] == "user" else by_id[key[1]].n_prizes

    def edge_cost(parent: UnitKey, child: UnitKey) -> float:
        np_ = prizes(child)
        d = site.diameter_small if np_ == 1 else site.diameter_large
        flow = np_ / n_u * site.supply_flow
        return pipe_steady_loss(_dist(position(parent), position(child)),
                                d, flow, t_in, site)

    node_cost: dict[UnitKey, float] = {}

    def node_lbc(key: UnitKey) -> float:
        if key[0] == "user":
            return 0.0
        if key in node_cost:
            return node_cost[key]
        cand = by_id[key[1]]
        total = sum(edge_cost(key, c) + node_lbc(c) for c in cand.children)
        node_cost[key] = total
        return total

    for c in candidates:
        node_lbc(("cand", c.id))
    return edge_cost, node_cost


@dataclass(frozen=True)
class PipeRun:
    """One physical pipe of an expanded design tree."""

    parent: str
    child: str
    length: float
    diameter: float
    flow: float
    t_in: float
    t_out: float
    loss: float


@dataclass(frozen=True)
class DesignTree:
    """Edges of a complete design plus the candidate nodes they reference."""

    edges: tuple[tuple[UnitKey, UnitKey], ...]
    candidates: Mapping[int, CandidateNode]

    def prize_mask(self, n_users: int) -> int:
        mask = 0
        for _, child in self.edges:
            mask |= (1 << (child[1] - 1)) if child[0] == "user" \
                else self.candidates[child[1]].prize_mask
        return mask


@dataclass(frozen=True)
class TreeCost:
    true_cost: float           # W, total steady enthalpy loss
    total_length: float        # m
    min_temperature: float     # C, coldest feeding state
    pipes: tuple[PipeRun, ...]


def _expand_physical(tree: DesignTree, site: SiteSpec):
    """Flatten a design tree to physical pipes (parents before children).

    Returns rows (parent_row, parent_key, child_key, length, diameter, flow)
    where parent_row indexes the feeding pipe upstream (-1 for the plant).
    """
    by_id = tree.candidates
    attached: dict[UnitKey, list[UnitKey]] = {}
    for p, c in tree.edges:
        attached.setdefault(p, []).append(c)

    def mask_of(key: UnitKey) -> int:
        return (1 << (key[1] - 1)) if key[0] == "user" \
            else by_id[key[1]].prize_mask

    def users_below(key: UnitKey) -> int:
        own = bin(mask_of(key)).count("1")
        return own + sum(users_below(z) for z in attached.get(key, ()))

    def position(key: UnitKey) -> tuple[float, float]:
        if key[0] == "root":
            return site.plant
        if key[0] == "user":
            return site.user_position(key[1])
        return by_id[key[1]].position

    n_u = site.n_users
    rows: list[tuple[int, UnitKey, UnitKey, float, float, float]] = []

    def visit(parent_row: int, parent_key: UnitKey, key: UnitKey, nd: int):
        length = _dist(position(parent_key), position(key))
        diameter = site.diameter_small if nd == 1 else site.diameter_large
        flow = nd / n_u * site.supply_flow
        row = len(rows)
        rows.append((parent_row, parent_key, key, length, diameter, flow))
        if key[0] == "cand":
            for ck in by_id[key[1]].children:
                visit(row, key, ck, bin(mask_of(ck)).count("1"))
        for z in attached.get(key, ()):
            visit(row, key, z, users_below(z))

    for child in attached.get(ROOT, ()):
        visit(-1, ROOT, child, users_below(child))
    return rows


def steady_state_cost(tree: DesignTree, site: SiteSpec) -> TreeCost:
    """True cost of a complete tree from the feeding-line steady state.

    Assembles the reduced model over the expanded tree (lower triangular by
    construction, parents first), solves it, and sums the enthalpy losses;
    the result is checked against the surface-loss balance.
    """
    rows = _expand_physical(tree, site)
    state_of: list[int] = []       # per row: its state index, or the parent's
    c1s, c2s = [], []
    parents = []
    for parent_row, _, _, length, diameter, flow in rows:
        if length <= 0.0:
            state_of.append(-2)    # alias to upstream temperature
            continue
        volume = math.pi * (diameter / 2.0) ** 2 * length
        c1s.append(flow / (site.rho * volume))
        c2s.append(site.h * math.pi * diameter * length
                   / (site.rho * site.cp * volume))
        parents.append(parent_row)
        state_of.append(len(c1s) - 1)

    def upstream_state(parent_row: int) -> int:
        while parent_row >= 0 and state_of[parent_row] == -2:
            parent_row = rows[parent_row][0]
        return -1 if parent_row < 0 else state_of[parent_row]

    n = len(c1s)
    temps = np.empty(0)
    if n:
        A = np.zeros((n, n))
        rhs = np.zeros(n)
        for i in range(n):
            A[i, i] = -(c1s[i] + c2s[i])
            up = upstream_state(parents[i])
            if up < 0:
                rhs[i] -= c1s[i] * site.supply_temperature
            else:
                A[i, up] = c1s[i]
            rhs[i] -= c2s[i] * site.ambient_temperature
        if np.any(np.diag(A) == 0.0):
            raise DesignError("reduced steady-state matrix is singular")
        temps = solve_triangular(A, rhs, lower=True)

    pipes = []
    total = 0.0
    surface = 0.0
    length_sum = 0.0
    min_t = site.supply_temperature
    for row_i, (parent_row, pkey, ckey, length, diameter, flow) in enumerate(rows):
        up = upstream_state(parent_row)
        t_in = site.supply_temperature if up < 0 else float(temps[up])
        st = state_of[row_i]
        if st == -2:
            t_out = t_in
            loss = 0.0
        else:
            t_out = float(temps[st])
            loss = flow * site.cp * (t_in - t_out)
            surface += (site.h * math.pi * diameter * length
                        * (t_out - site.ambient_temperature))
        total += loss
        length_sum += length
        min_t = min(min_t, t_out)
        pipes.append(PipeRun(parent=format_key(pkey), child=format_key(ckey),
                             length=length, diameter=diameter, flow=flow,
                             t_in=t_in, t_out=t_out, loss=loss))
    if abs(total - surface) > 1e-6 * max(abs(total), 1.0):
        raise DesignError(
            f"energy balance violated: advective {total!r} vs surface {surface!r}")
    return TreeCost(true_cost=total, total_length=length_sum,
                    min_temperature=min_t, pipes=tuple(pipes))


@dataclass(frozen=True)
class Edge:
    id: int
    parent: UnitKey
    child: UnitKey
    child_mask: int
    cost: float        # LBC (loss mode) or exact added length (length mode)


@dataclass(frozen=True)
class UnitStatics:
    """Per-unit constants for fast tree evaluation. A candidate's internal
    pipes carry fixed flows, so its internal loss is kappa * (T_in - Tamb)
    and its coldest internal state sits at mu * (T_in - Tamb) above ambient.
    """

    position: tuple[float, float]
    mask: int
    kappa: float           # W/K of inlet excess temperature
    mu: float              # coldest-state fraction of inlet excess
    internal_length: float


@dataclass
class ProblemGraph:
    """Directed edges between prize-disjoint units with lower-bound costs.

    ``user_floor[i]`` is an admissible per-user remainder: user i+1's own
    feed pipe can never cost less than a single-user pipe over the shortest
    distance from any node position, so the bound of a partial tree may add
    the floors of all still-missing users.
    """

    site: SiteSpec
    candidates: tuple[CandidateNode, ...]
    objective: str                 # "loss" | "length"
    delta_t: float
    edges: tuple[Edge, ...]
    by_parent: Mapping[UnitKey, tuple[Edge, ...]]
    full_mask: int
    user_floor: tuple[float, ...]
    statics: Mapping[UnitKey, UnitStatics]

    @property
    def candidate_map(self) -> dict[int, CandidateNode]:
        return {c.id: c for c in self.candidates}


def build_problem_graph(site: SiteSpec, candidates: Sequence[CandidateNode],
                        *, delta_t: float = 0.0,
                        objective: str = "loss") -> ProblemGraph:
    """Assemble the problem graph: the root connects to every unit, and any
    two units with disjoint prize sets connect parent to child. Edge costs
    fold in the child's node cost so accumulation stays additive."""
    if objective not in ("loss", "length"):
        raise ValueError(f"unknown objective {objective!r}")
    n = site.n_users
    full = (1 << n) - 1
    units: list[tuple[UnitKey, int]] = \
        [(("user", i), 1 << (i - 1)) for i in range(1, n + 1)] + \
        [(("cand", c.id), c.prize_mask) for c in candidates]
    by_mask: dict[int, list[UnitKey]] = {}
    for key, mask in units:
        by_mask.setdefault(mask, []).append(key)

    by_id = {c.id: c for c in candidates}
    if objective == "loss":
        edge_lbc, node_lbc = lower_bound_costs(site, candidates, delta_t)

        def cost(parent: UnitKey, child: UnitKey) -> float:
            return edge_lbc(parent, child) + node_lbc.get(child, 0.0)
    else:
        def position(key: UnitKey):
            if key[0] == "root":
                return site.plant
            if key[0] == "user":
                return site.user_position(key[1])
            return by_id[key[1]].position

        def cost(parent: UnitKey, child: UnitKey) -> float:
            internal = 0.0 if child[0] == "user" \
                else by_id[child[1]].internal_length
            return _dist(position(parent), position(child)) + internal

    raw: list[tuple[float, UnitKey, UnitKey, int]] = []
    for key, mask in units:
        raw.append((cost(ROOT, key), ROOT, key, mask))
    for pkey, pmask in units:
        comp = full ^ pmask
        sub = comp
        while sub:
            for child in by_mask.get(sub, ()):
                raw.append((cost(pkey, child), pkey, child, sub))
            sub = (sub - 1) & comp

    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    edges = tuple(Edge(id=i, parent=p, child=c, child_mask=m, cost=co)
                  for i, (co, p, c, m) in enumerate(raw))
    by_parent: dict[UnitKey, list[Edge]] = {}
    for e in edges:
        by_parent.setdefault(e.parent, []).append(e)

    positions = [site.plant] + [by_id[c.id].position for c in candidates]
    floors = []
    for i in range(1, n + 1):
        upos = site.user_position(i)
        d_min = min(_dist(p, upos) for p in positions
                    + [site.user_position(j) for j in range(1, n + 1) if j != i])
        if objective == "loss":
            floors.append(pipe_steady_loss(
                d_min, site.diameter_small, site.supply_flow / n,
                site.supply_temperature - delta_t, site))
        else:
            floors.append(d_min)
    return ProblemGraph(site=site, candidates=tuple(candidates),
                        objective=objective, delta_t=delta_t, edges=edges,
                        by_parent={k: tuple(v) for k, v in by_parent.items()},
                        full_mask=full, user_floor=tuple(floors),
                        statics=_unit_statics(site, candidates))


def _retention(length: float, diameter: float, flow: float,
               site: SiteSpec) -> float:
    """Fraction of the inlet excess temperature left at the pipe outlet."""
    if length <= 0.0:
        return 1.0
    volume = math.pi * (diameter / 2.0) ** 2 * length
    c1 = flow / (site.rho * volume)
    c2 = (site.h * math.pi * diameter * length
          / (site.rho * site.cp * volume))
    return c1 / (c1 + c2)


def _unit_statics(site: SiteSpec, candidates: Sequence[CandidateNode]
                  ) -> dict[UnitKey, UnitStatics]:
    n_u = site.n_users
    out: dict[UnitKey, UnitStatics] = {}
    for i in range(1, n_u + 1):
        out[("user", i)] = UnitStatics(position=site.user_position(i),
                                       mask=1 << (i - 1), kappa=0.0, mu=1.0,
                                       internal_length=0.0)
    for cand in candidates:      # children precede parents in generation order
        kappa = 0.0
        mu = math.inf
        for ck in cand.children:
            child = out[ck]
            npr = bin(child.mask).count("1")
            flow = npr / n_u * site.supply_flow
            d = site.diameter_small if npr == 1 else site.diameter_large
            r = _retention(_dist(cand.position, child.position), d, flow, site)
            kappa += flow * site.cp * (1.0 - r) + child.kappa * r
            mu = min(mu, r * child.mu)
        out[("cand", cand.id)] = UnitStatics(
            position=cand.position, mask=cand.prize_mask, kappa=kappa, mu=mu,
            internal_length=cand.internal_length)
    return out


def _lean_eval(graph: ProblemGraph, ids: tuple[int, ...]):
    """(true_cost, length, min_temperature) of a complete tree, walking only
    problem-graph edges and folding in the candidates' precomputed internal
    constants. Matches the full expansion (same physics, grouped terms)."""
    site = graph.site
    statics = graph.statics
    n_u = site.n_users
    cp = site.cp
    kids: dict[UnitKey, list[UnitKey]] = {}
    for i in ids:
        e = graph.edges[i]
        kids.setdefault(e.parent, []).append(e.child)

    def n_down(key: UnitKey) -> int:
        own = bin(statics[key].mask).count("1")
        return own + sum(n_down(z) for z in kids.get(key, ()))

    total = 0.0
    length_sum = 0.0
    min_excess = math.inf
    tamb = site.ambient_temperature

    def visit(pos_p, key: UnitKey, excess_in: float):
        nonlocal total, length_sum, min_excess
        st = statics[key]
        nd = n_down(key)
        flow = nd / n_u * site.supply_flow
        d = site.diameter_small if nd == 1 else site.diameter_large
        length = _dist(pos_p, st.position)
        r = _retention(length, d, flow, site)
        x = r * excess_in
        total += flow * cp * (excess_in - x) + st.kappa * x
        length_sum += length + st.internal_length
        min_excess = min(min_excess, x * st.mu)
        for z in kids.get(key, ()):
            visit(st.position, z, x)

    x0 = site.supply_temperature - tamb
    for child in kids.get(ROOT, ()):
        visit(site.plant, child, x0)
    return total, length_sum, tamb + min_excess


@dataclass
class SearchStats:
    trees_evaluated: int = 0
    trees_completed: int = 0
    prunes: int = 0


def tree_from_ids(graph: ProblemGraph, ids: tuple[int, ...]) -> DesignTree:
    """Materialize the design tree selected by the given edge ids."""
    edges = tuple((graph.edges[i].parent, graph.edges[i].child) for i in ids)
    used: dict[int, CandidateNode] = {}
    for _, child in edges:
        if child[0] == "cand":
            _collect_cands(graph.candidate_map, child[1], used)
    return DesignTree(edges=edges, candidates=used)


def _collect_cands(by_id: Mapping[int, CandidateNode], cid: int,
                   out: dict[int, CandidateNode]):
    cand = by_id[cid]
    out[cid] = cand
    for ck in cand.children:
        if ck[0] == "cand":
            _collect_cands(by_id, ck[1], out)


def _search(graph: ProblemGraph, *, prune: bool = True,
            on_complete: Callable[[tuple[int, ...]], None] | None = None,
            complete_cap: int | None = None):
    """Enumerate design trees in canonical order (depth first, siblings by
    ascending edge id) and track the best under the graph's objective.

    Returns (best, stats) where best is None or a dict with ids/tree/cost
    fields. With ``prune`` disabled every complete tree is visited, subject
    to ``complete_cap``.
    """
    from bisect import bisect_right

    site = graph.site
    full = graph.full_mask
    stats = SearchStats()
    best: dict | None = None

    # flat per-parent arrays: ids for bisect, rows as plain tuples
    rows_of: dict[UnitKey, list[tuple[int, UnitKey, int, float]]] = {}
    ids_of: dict[UnitKey, list[int]] = {}
    for key, edges in graph.by_parent.items():
        rows_of[key] = [(e.id, e.child, e.child_mask, e.cost) for e in edges]
        ids_of[key] = [e.id for e in edges]

    def sort_key(tc, length, ids):
        if graph.objective == "loss":
            return (tc, length, ids)
        return (length, ids)

    def consider(ids_seq):
        nonlocal best
        stats.trees_completed += 1
        if on_complete is not None:
            on_complete(tuple(ids_seq))
        ids = tuple(sorted(ids_seq))
        tc, length, min_t = _lean_eval(graph, ids)
        stats.trees_evaluated += 1
        key = sort_key(tc, length, ids)
        if best is None or key < best["key"]:
            best = {"key": key, "ids": ids, "tc": tc,
                    "length": length, "min_t": min_t}

    # Initial incumbents: the cheapest-bound single full-prize connection,
    # plus a greedy tree (cheapest valid edge until all prizes collected) so
    # pruning starts from a realistic cost even without full-prize nodes.
    if prune:
        init_edges = [e for e in graph.by_parent.get(ROOT, ())
                      if e.child_mask == full]
        if init_edges:
            first = min(init_edges, key=lambda e: (e.cost, e.child))
            consider([first.id])
        greedy_ids: list[int] = []
        in_tree: list[UnitKey] = [ROOT]
        mask0 = 0
        while mask0 != full:
            cand = min((e for key in in_tree
                        for e in graph.by_parent.get(key, ())
                        if not e.child_mask & mask0),
                       key=lambda e: (e.cost, e.id), default=None)
            if cand is None:
                break
            greedy_ids.append(cand.id)
            in_tree.append(cand.child)
            mask0 |= cand.child_mask
        if mask0 == full:
            consider(greedy_ids)

    class _Stop(Exception):
        pass

    floor_cache: dict[int, float] = {full: 0.0}
    user_floor = graph.user_floor

    def inpipe_floor(mask: int) -> float:
        """Sum of the missing users' own feed-pipe floors."""
        cached = floor_cache.get(mask)
        if cached is None:
            cached = 0.0
            missing = full & ~mask
            while missing:
                bit = missing & -missing
                cached += user_floor[bit.bit_length() - 1]
                missing ^= bit
            floor_cache[mask] = cached
        return cached

    # Reach-based floor: every missing user's flow share still has to travel
    # from a node of the current tree to the user through pipes added later,
    # which carry at most the total missing flow and at least diameter D_S.
    # A single lumped pipe over the straight-line reach never loses more
    # than any realizable pipe run, so the per-user share losses are a valid
    # additive remainder. (For the length objective the reach itself counts,
    # but shared runs forbid summing; the largest single reach is safe.)
    n_users = site.n_users
    share = site.supply_flow / n_users
    x_cap = max(site.supply_temperature - graph.delta_t
                - site.ambient_temperature, 0.0)
    gamma_num = site.h * math.pi * site.diameter_small / site.cp
    user_pos = [site.user_position(i) for i in range(1, n_users + 1)]
    is_loss = graph.objective == "loss"
    statics = graph.statics

    def reach_floor(mask: int, reach: list[float]) -> float:
        n_miss = n_users - bin(mask).count("1")
        if n_miss == 0:
            return 0.0
        if not is_loss:
            worst = 0.0
            m = full & ~mask
            while m:
                bit = m & -m
                worst = max(worst, reach[bit.bit_length() - 1])
                m ^= bit
            return worst
        gamma = gamma_num / (n_miss * share)
        total = 0.0
        m = full & ~mask
        while m:
            bit = m & -m
            g = gamma * reach[bit.bit_length() - 1]
            total += g / (1.0 + g)
            m ^= bit
        return total * share * site.cp * x_cap

    # Surface-loss floor: every pipe sits at or above the capped inlet
    # temperature, so each remaining meter loses at least h*pi*D_S*x_cap
    # regardless of flow. The remaining run length is at least the Steiner
    # tree over the missing users plus the (contracted) current tree, and
    # the Euclidean Steiner ratio bound 0.824 relates that to the MST.
    per_meter = site.h * math.pi * site.diameter_small * x_cap
    STEINER_RATIO = 0.824

    def mst_floor(mask: int, reach: list[float]) -> float:
        pts = []
        m = full & ~mask
        while m:
            bit = m & -m
            pts.append(bit.bit_length() - 1)
            m ^= bit
        if not pts:
            return 0.0
        # Prim over missing users + the contracted tree as the start node
        dist = [reach[i] for i in pts]
        in_tree = [False] * len(pts)
        total = 0.0
        for _ in range(len(pts)):
            best_i = -1
            best_d = math.inf
            for i, d in enumerate(dist):
                if not in_tree[i] and d < best_d:
                    best_d = d
                    best_i = i
            in_tree[best_i] = True
            total += best_d
            px, py = user_pos[pts[best_i]]
            for i, j in enumerate(pts):
                if not in_tree[i]:
                    d = math.hypot(px - user_pos[j][0], py - user_pos[j][1])
                    if d < dist[i]:
                        dist[i] = d
        lower = STEINER_RATIO * total
        return lower * per_meter if is_loss else lower

    def grow(stack: list, mask: int, acc: float, seq: list[int],
             reach: list[float]):
        if mask == full:
            consider(seq)
            if complete_cap is not None and stats.trees_completed >= complete_cap:
                raise _Stop
            return
        bound = best["key"][0] if (prune and best is not None) else None
        for t in range(len(stack) - 1, -1, -1):
            key, last = stack[t]
            rows = rows_of.get(key)
            if not rows:
                continue
            start = 0 if last < 0 else bisect_right(ids_of[key], last)
            for e_id, child, cmask, cost in rows[start:]:
                if cmask & mask:
                    continue
                total = acc + cost
                new_mask = mask | cmask
                if bound is not None:
                    if total > bound:
                        stats.prunes += 1
                        break   # edges at one parent are cost-ascending
                    if total + inpipe_floor(new_mask) > bound:
                        stats.prunes += 1
                        continue
                cpos = statics[child].position
                new_reach = [min(r, _dist(cpos, user_pos[i]))
                             for i, r in enumerate(reach)]
                if bound is not None and \
                        (total + reach_floor(new_mask, new_reach) > bound
                         or total + mst_floor(new_mask, new_reach) > bound):
                    stats.prunes += 1
                    continue
                seq.append(e_id)
                grow(stack[:t] + [(key, e_id), (child, -1)],
                     new_mask, total, seq, new_reach)
                seq.pop()
                if prune and best is not None:
                    bound = best["key"][0]

    reach0 = [_dist(site.plant, p) for p in user_pos]
    try:
        grow([(ROOT, -1)], 0, 0.0, [], reach0)
    except _Stop:
        pass
    return best, stats


@dataclass
class DesignResult:
    """Winning layout of one design run."""

    objective: str
    tree: DesignTree
    true_cost: float               # W, steady enthalpy loss of the winner
    total_length: float            # m
    delta_t_max: float             # K, largest steady temperature drop
    iterations: int
    trees_evaluated: int
    trees_pruned: int
    pipes: tuple[PipeRun, ...]
    edge_ids: tuple[int, ...] = ()

    @property
    def edges(self) -> tuple[tuple[UnitKey, UnitKey], ...]:
        return self.tree.edges


def branch_and_bound(graph: ProblemGraph, site: SiteSpec | None = None
                     ) -> DesignResult:
    """Exact search over the problem graph; prunes partial trees whose
    accumulated bound exceeds the incumbent's cost."""
    site = site if site is not None else graph.site
    best, stats = _search(graph, prune=True)
    if best is None:
        raise DesignError("no feasible design tree collects every user")
    tree = tree_from_ids(graph, best["ids"])
    cost = steady_state_cost(tree, site)
    return DesignResult(
        objective=graph.objective, tree=tree,
        true_cost=cost.true_cost, total_length=cost.total_length,
        delta_t_max=site.supply_temperature - cost.min_temperature,
        iterations=1, trees_evaluated=stats.trees_evaluated,
        trees_pruned=stats.prunes, pipes=cost.pipes, edge_ids=best["ids"])


def length_baseline(site: SiteSpec,
                    candidates: Sequence[CandidateNode]) -> DesignResult:
    """Shortest-total-length design over the same candidate set; its
    ``true_cost`` still reports the enthalpy loss for comparison."""
    graph = build_problem_graph(site, candidates, objective="length")
    return branch_and_bound(graph, site)


def optimize(site: SiteSpec, delta_t_init: float = 0.0, *,
             objective: str = "loss", max_candidates: int | None = None,
             combine_radius: float | None = None,
             max_outer: int = 10,
             candidates: Sequence[CandidateNode] | None = None
             ) -> DesignResult:
    """Full design solve: candidate generation, bound construction, branch
    and bound, and the outer temperature-drop iteration.

    The drop cap starts at ``delta_t_init`` and is raised to the winner's
    actual maximum drop until the bounds are consistent (cap >= drop).
    """
    if candidates is None:
        candidates = (generate_candidates(site, max_nodes=max_candidates,
                                          combine_radius=combine_radius)
                      if site.n_users >= 2 else ())
    if objective == "length":
        return length_baseline(site, candidates)

    delta_t = float(delta_t_init)
    for iteration in range(1, max_outer + 1):
        graph = build_problem_graph(site, candidates, delta_t=delta_t,
                                    objective="loss")
        result = branch_and_bound(graph, site)
        if delta_t >= result.delta_t_max - 1e-12:
            return replace(result, iterations=iteration)
        delta_t = result.delta_t_max
    raise DesignError(f"temperature-drop iteration did not settle after "
                      f"{max_outer} rounds")
