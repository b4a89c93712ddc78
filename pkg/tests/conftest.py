"""Shared fixtures: the reference two-user network and random generators."""

from __future__ import annotations

import numpy as np
import pytest

from dhnkit.errors import FlowSolveError
from dhnkit.topology import (BuildingParams, FluidProps, NetworkTopology,
                             PipeParams, SplitNode, UserNode)


def pipe(L, D, hA, zeta):
    return PipeParams(length=L, diameter=D, hA_s=hA, zeta=zeta)


# Reference two-user network: one split node feeding two parallel bypass
# users. Realistic small-district parameters; every value distinct so tests
# can trace matrix entries back to segments.
TWO_USER_PARAMS = {
    1: {"F": (60.0, 0.05, 4.7, 900.0), "S1": (15.0, 0.04, 0.62, 360.0),
        "S2": (12.0, 0.04, 0.0, 520.0), "S3": (15.0, 0.04, 0.55, 340.0),
        "R": (60.0, 0.05, 4.3, 860.0), "B": (15.0, 0.04, 0.48, 1900.0)},
    2: {"F": (85.0, 0.05, 6.6, 1250.0), "S1": (18.0, 0.04, 0.74, 410.0),
        "S2": (12.0, 0.04, 0.0, 555.0), "S3": (18.0, 0.04, 0.66, 385.0),
        "R": (85.0, 0.05, 6.1, 1180.0), "B": (16.0, 0.04, 0.51, 2050.0)},
    3: {"F": (150.0, 0.08, 18.9, 210.0), "R": (150.0, 0.08, 17.6, 195.0)},
}
TWO_USER_BUILDINGS = {
    1: BuildingParams(hA_s_hex=1500.0, hA_s_env=320.0, thermal_capacity=1.0e7),
    2: BuildingParams(hA_s_hex=1320.0, hA_s_env=280.0, thermal_capacity=8.6e6),
}


def two_user_network(with_buildings=True) -> NetworkTopology:
    def user(uid):
        p = TWO_USER_PARAMS[uid]
        return UserNode(
            feeding=pipe(*p["F"]), s1=pipe(*p["S1"]), s2=pipe(*p["S2"]),
            s3=pipe(*p["S3"]), ret=pipe(*p["R"]), bypass=pipe(*p["B"]),
            building=TWO_USER_BUILDINGS[uid] if with_buildings else None)

    split = SplitNode(feeding=pipe(*TWO_USER_PARAMS[3]["F"]),
                      ret=pipe(*TWO_USER_PARAMS[3]["R"]))
    return NetworkTopology(
        nodes={1: user(1), 2: user(2), 3: split},
        edges=frozenset({(0, 3), (3, 1), (3, 2)}))


TWO_USER_SUPPLY = 2.0
TWO_USER_DRAWS = {1: 0.55, 2: 0.42}


@pytest.fixture
def two_user():
    return two_user_network()


def random_topology(rng: np.random.Generator, max_users: int = 8,
                    max_splits: int = 3, with_buildings: bool = False
                    ) -> NetworkTopology:
    """Random valid tree: users and splits with randomized parameters."""
    users_left = int(rng.integers(1, max_users + 1))
    splits_left = int(rng.integers(0, max_splits + 1))
    tree: dict[int, list[int]] = {}
    kinds: dict[int, str] = {}
    counter = [0]

    def new(kind):
        counter[0] += 1
        kinds[counter[0]] = kind
        tree[counter[0]] = []
        return counter[0]

    def grow():
        nonlocal users_left, splits_left
        if splits_left > 0 and users_left >= 2 and rng.random() < 0.45:
            splits_left -= 1
            sid = new("s")
            k = int(rng.integers(1, min(3, users_left) + 1))
            for _ in range(k):
                if users_left < 1:
                    break
                tree[sid].append(grow())
            return sid
        users_left -= 1
        uid = new("u")
        if users_left > 0 and rng.random() < 0.35:
            tree[uid].append(grow())
        return uid

    root = grow()
    # renumber: users 1..n_u, splits n_u+1..
    user_tmp = [t for t in sorted(kinds) if kinds[t] == "u"]
    split_tmp = [t for t in sorted(kinds) if kinds[t] == "s"]
    remap = {t: i + 1 for i, t in enumerate(user_tmp)}
    remap.update({t: len(user_tmp) + i + 1 for i, t in enumerate(split_tmp)})

    def rand_pipe(scale=1.0):
        L = float(rng.uniform(20, 200)) * scale
        D = float(rng.uniform(0.03, 0.09))
        return PipeParams(length=L, diameter=D,
                          hA_s=float(rng.uniform(0.2, 20.0)),
                          zeta=float(rng.uniform(100.0, 600.0)))

    nodes = {}
    edges = set()
    for tmp, kind in kinds.items():
        nid = remap[tmp]
        for child in tree[tmp]:
            edges.add((nid, remap[child]))
        if kind == "s":
            nodes[nid] = SplitNode(feeding=rand_pipe(), ret=rand_pipe())
        else:
            leaf = not tree[tmp]
            building = None
            if with_buildings:
                building = BuildingParams(
                    hA_s_hex=float(rng.uniform(800, 2000)),
                    hA_s_env=float(rng.uniform(100, 500)),
                    thermal_capacity=float(rng.uniform(3e6, 2e7)))
            nodes[nid] = UserNode(
                feeding=rand_pipe(), s1=rand_pipe(0.3), s2=rand_pipe(0.2),
                s3=rand_pipe(0.3), ret=rand_pipe(),
                bypass=rand_pipe(0.2) if leaf else None, building=building)
    edges.add((0, remap[root]))
    return NetworkTopology(nodes=nodes, edges=frozenset(edges))


def random_draws(rng: np.random.Generator, topology: NetworkTopology,
                 supply: float):
    """Feasible random draws: a fraction of each user's ideal share."""
    from dhnkit.hydraulics import ideal_flow_split
    ideal = ideal_flow_split(topology, supply)
    return {u: float(v * rng.uniform(0.3, 0.7))
            for u, v in ideal.user_draw.items()}


def random_flow_case(seed: int, max_users=8, max_splits=3,
                     with_buildings=False):
    """(topology, supply, draws) with a solvable flow split; retries seeds."""
    from dhnkit.hydraulics import solve_flow_split
    rng = np.random.default_rng(seed)
    for _ in range(50):
        topo = random_topology(rng, max_users, max_splits, with_buildings)
        supply = float(rng.uniform(1.0, 8.0))
        draws = random_draws(rng, topo, supply)
        try:
            solve_flow_split(topo, supply, draws)
            return topo, supply, draws
        except FlowSolveError:
            continue
    raise RuntimeError(f"no solvable random case from seed {seed}")
