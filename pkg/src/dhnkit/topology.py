"""Rooted-tree description of a district heating network.

A network is a directed tree rooted at the heating plant (node 0). Every
other node is either a user loop (five pipe segments F, S1, S2, S3, R plus
an optional bypass B at branch ends) or a split node (a feeding and a
return header where the supply flow divides between branches). Users are
numbered 1..n_u and split nodes n_u+1..n_u+n_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

from .errors import TopologyError

PLANT = 0

# Segment keys in state order within one user block.
USER_SEGMENTS = ("F", "S1", "S2", "S3", "R")
BYPASS = "B"

# Relative tolerance for the consistency check between a stored loss
# coefficient and the one derived from (k, lambda, geometry).
_ZETA_RTOL = 1e-12


@dataclass(frozen=True)
class FluidProps:
    """Working fluid constants (defaults: water near 80 C)."""

    rho: float = 971.0      # kg/m^3
    cp: float = 4179.0      # J/(kg K)

    def __post_init__(self):
        if self.rho <= 0 or self.cp <= 0:
            raise ValueError("fluid density and heat capacity must be positive")


def loss_coefficient(k: float, lam: float, length: float, diameter: float,
                     cross_section: float, rho: float) -> float:
    """Combine concentrated (k) and distributed (lam) pressure-loss
    coefficients into the single quadratic coefficient zeta [Pa s^2/kg^2]."""
    return (k + lam * length / diameter) / (2.0 * rho * cross_section**2)


@dataclass(frozen=True)
class PipeParams:
    """Geometry and loss parameters of one pipe segment.

    ``zeta`` may be given directly or left None when (k, lam) are supplied;
    it is then resolved against the fluid density when the segment is
    attached to a topology. ``cross_section`` and ``volume`` default to a
    circular bore of the given diameter.
    """

    length: float                       # m
    diameter: float                     # m
    hA_s: float = 0.0                   # W/K, lumped transfer to surroundings
    cross_section: float | None = None  # m^2
    volume: float | None = None         # m^3
    zeta: float | None = None           # Pa s^2/kg^2
    k: float | None = None              # concentrated loss coefficient
    lam: float | None = None            # distributed loss coefficient

    def __post_init__(self):
        if self.cross_section is None:
            object.__setattr__(self, "cross_section",
                               math.pi * (self.diameter / 2.0) ** 2)
        if self.volume is None:
            object.__setattr__(self, "volume", self.cross_section * self.length)
        if self.length <= 0 or self.diameter <= 0:
            raise ValueError("pipe length and diameter must be positive")
        if self.cross_section <= 0 or self.volume <= 0:
            raise ValueError("pipe cross section and volume must be positive")
        if self.hA_s < 0:
            raise ValueError("hA_s must be non-negative")
        if self.zeta is not None and self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        if self.zeta is None and (self.k is None or self.lam is None):
            raise ValueError("give zeta directly or both k and lam")

    def resolved(self, rho: float) -> "PipeParams":
        """Return a copy with ``zeta`` canonically populated for fluid
        density ``rho``; checks consistency when both forms are given."""
        if self.k is None or self.lam is None:
            return self
        derived = loss_coefficient(self.k, self.lam, self.length,
                                   self.diameter, self.cross_section, rho)
        if self.zeta is None:
            return replace(self, zeta=derived)
        if abs(self.zeta - derived) > _ZETA_RTOL * max(abs(derived), 1e-300):
            raise TopologyError(
                f"zeta={self.zeta!r} inconsistent with value {derived!r} "
                "derived from (k, lam, geometry)")
        return self


@dataclass(frozen=True)
class BuildingParams:
    """Lumped building attached to a user's heat exchanger."""

    hA_s_hex: float          # W/K, heat exchanger (network side S2 <-> building)
    hA_s_env: float          # W/K, building envelope to ambient
    thermal_capacity: float  # J/K

    def __post_init__(self):
        if min(self.hA_s_hex, self.hA_s_env, self.thermal_capacity) <= 0:
            raise ValueError("building parameters must be strictly positive")


@dataclass(frozen=True)
class UserNode:
    """One user loop: feeding line F, valve-side S1, heat exchanger S2,
    return-side S3, return line R; leaf users also carry a bypass B."""

    feeding: PipeParams
    s1: PipeParams
    s2: PipeParams
    s3: PipeParams
    ret: PipeParams
    bypass: PipeParams | None = None
    building: BuildingParams | None = None
    position: tuple[float, float] | None = None

    def segments(self) -> dict[str, PipeParams]:
        segs = {"F": self.feeding, "S1": self.s1, "S2": self.s2,
                "S3": self.s3, "R": self.ret}
        if self.bypass is not None:
            segs[BYPASS] = self.bypass
        return segs


@dataclass(frozen=True)
class SplitNode:
    """Junction where supply flow divides; mirrored by a return mixer."""

    feeding: PipeParams
    ret: PipeParams
    position: tuple[float, float] | None = None

    def segments(self) -> dict[str, PipeParams]:
        return {"F": self.feeding, "R": self.ret}


Node = Union[UserNode, SplitNode]


@dataclass(frozen=True)
class NetworkTopology:
    """Immutable network description: nodes, tree edges, fluid constants.

    Construction canonicalizes every pipe's loss coefficient to ``zeta``;
    structural rules are checked by :func:`validate`, which reports
    violations as data instead of raising.
    """

    nodes: Mapping[int, Node]
    edges: frozenset[tuple[int, int]]
    fluid: FluidProps = field(default_factory=FluidProps)

    def __post_init__(self):
        rho = self.fluid.rho
        canonical: dict[int, Node] = {}
        for nid, node in self.nodes.items():
            if isinstance(node, UserNode):
                node = replace(
                    node,
                    feeding=node.feeding.resolved(rho),
                    s1=node.s1.resolved(rho),
                    s2=node.s2.resolved(rho),
                    s3=node.s3.resolved(rho),
                    ret=node.ret.resolved(rho),
                    bypass=None if node.bypass is None else node.bypass.resolved(rho),
                )
            else:
                node = replace(node, feeding=node.feeding.resolved(rho),
                               ret=node.ret.resolved(rho))
            canonical[int(nid)] = node
        object.__setattr__(self, "nodes", canonical)
        object.__setattr__(self, "edges", frozenset((int(a), int(b))
                                                    for a, b in self.edges))

    def user_ids(self) -> tuple[int, ...]:
        return tuple(sorted(n for n, v in self.nodes.items()
                            if isinstance(v, UserNode)))

    def split_ids(self) -> tuple[int, ...]:
        return tuple(sorted(n for n, v in self.nodes.items()
                            if isinstance(v, SplitNode)))

    def pipe(self, node: int, segment: str) -> PipeParams:
        return self.nodes[node].segments()[segment]


@dataclass(frozen=True)
class Violation:
    """One broken structural rule, attached to the offending node when any."""

    code: str
    node: int | None
    message: str

    def __str__(self):
        where = "" if self.node is None else f" (node {self.node})"
        return f"{self.code}{where}: {self.message}"


@dataclass(frozen=True)
class NodeSets:
    """Partition of the tree plus adjacency maps used by every solver."""

    users: tuple[int, ...]
    splits: tuple[int, ...]
    leaves: frozenset[int]
    parent: Mapping[int, int]
    children: Mapping[int, tuple[int, ...]]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_splits(self) -> int:
        return len(self.splits)


def _adjacency(topology: NetworkTopology):
    parent: dict[int, int] = {}
    children: dict[int, list[int]] = {PLANT: []}
    duplicates: list[int] = []
    for a, b in sorted(topology.edges):
        children.setdefault(a, [])
        children[a].append(b)
        if b in parent:
            duplicates.append(b)
        parent[b] = a
    for lst in children.values():
        lst.sort()
    return parent, {k: tuple(v) for k, v in children.items()}, duplicates


def validate(topology: NetworkTopology) -> list[Violation]:
    """Check every structural rule; an empty list means the topology is valid."""
    out: list[Violation] = []
    nodes = topology.nodes
    parent, children, duplicates = _adjacency(topology)

    for a, b in sorted(topology.edges):
        if b == PLANT:
            out.append(Violation("not-a-tree", PLANT,
                                 "the plant cannot appear as a child"))
        if a != PLANT and a not in nodes:
            out.append(Violation("unknown-node", a, "edge from undefined node"))
        if b != PLANT and b not in nodes:
            out.append(Violation("unknown-node", b, "edge to undefined node"))
    for b in duplicates:
        out.append(Violation("not-a-tree", b, "node has multiple parents"))

    if not children.get(PLANT):
        out.append(Violation("empty", PLANT, "the plant has no children"))

    # Reachability and cycle detection from the plant.
    seen: set[int] = set()
    stack = [PLANT]
    while stack:
        cur = stack.pop()
        for child in children.get(cur, ()):
            if child in seen or child == PLANT:
                continue
            seen.add(child)
            stack.append(child)
    for nid in sorted(nodes):
        if nid not in seen:
            out.append(Violation("not-a-tree", nid,
                                 "node is not reachable from the plant"))

    users = [n for n in sorted(nodes) if isinstance(nodes[n], UserNode)]
    splits = [n for n in sorted(nodes) if isinstance(nodes[n], SplitNode)]
    n_u = len(users)
    if users != list(range(1, n_u + 1)):
        out.append(Violation("index-convention", None,
                             f"users must be numbered 1..{n_u}, got {users}"))
    if splits != list(range(n_u + 1, n_u + 1 + len(splits))):
        out.append(Violation(
            "index-convention", None,
            f"splits must be numbered {n_u + 1}..{n_u + len(splits)}, got {splits}"))

    for nid in sorted(nodes):
        node = nodes[nid]
        kids = children.get(nid, ())
        if isinstance(node, SplitNode) and not kids:
            out.append(Violation("childless-split", nid,
                                 "split node has no out-branch"))
        if isinstance(node, UserNode):
            if len(kids) > 1:
                out.append(Violation("user-fanout", nid,
                                     "a user can pass flow to at most one child"))
            if not kids and node.bypass is None:
                out.append(Violation("missing-bypass", nid,
                                     "leaf user lacks bypass"))
            if kids and node.bypass is not None:
                out.append(Violation("unexpected-bypass", nid,
                                     "only leaf users carry a bypass segment"))
    return out


def node_sets(topology: NetworkTopology, check: bool = True) -> NodeSets:
    """Partition nodes into users/splits/leaves and build adjacency maps.

    With ``check`` (the default) the topology is validated first and a
    :class:`TopologyError` raised on any violation.
    """
    if check:
        violations = validate(topology)
        if violations:
            raise TopologyError("; ".join(str(v) for v in violations))
    parent, children, _ = _adjacency(topology)
    users = topology.user_ids()
    leaves = frozenset(u for u in users if not children.get(u))
    return NodeSets(users=users, splits=topology.split_ids(), leaves=leaves,
                    parent=parent, children=children)


def state_dimension(topology: NetworkTopology) -> int:
    """Number of pipe-temperature states: one per split feeding and return
    header, five per user, plus one per leaf bypass."""
    sets = node_sets(topology, check=False)
    return 2 * sets.n_splits + 5 * sets.n_users + len(sets.leaves)
