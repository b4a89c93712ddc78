"""File formats: network JSON, scenario CSV, and result writers.

All numeric output uses repr round-tripping (re-parsing reproduces the
exact float), '.' decimals, UTF-8, and '\\n' line endings. Column orders
are fixed and documented in the README.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .assembly import StateSpaceModel
from .calibration import CalibrationResult
from .errors import DhnError
from .optimizer import DesignResult, SiteSpec, format_key
from .simulation import Scenario, SimResult
from .topology import (BuildingParams, FluidProps, NetworkTopology, PipeParams,
                       SplitNode, UserNode)


class SchemaError(DhnError):
    """An input file does not match its documented schema."""


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# network JSON

def _pipe_to_json(pipe: PipeParams) -> dict:
    out = {"L": pipe.length, "D": pipe.diameter, "hA_s": pipe.hA_s,
           "A_c": pipe.cross_section, "V": pipe.volume}
    if pipe.zeta is not None:
        out["zeta"] = pipe.zeta
    if pipe.k is not None:
        out["k"] = pipe.k
    if pipe.lam is not None:
        out["lambda"] = pipe.lam
    return out


def _pipe_from_json(obj: dict, where: str) -> PipeParams:
    try:
        return PipeParams(
            length=float(obj["L"]), diameter=float(obj["D"]),
            hA_s=float(obj.get("hA_s", 0.0)),
            cross_section=None if "A_c" not in obj else float(obj["A_c"]),
            volume=None if "V" not in obj else float(obj["V"]),
            zeta=None if "zeta" not in obj else float(obj["zeta"]),
            k=None if "k" not in obj else float(obj["k"]),
            lam=None if "lambda" not in obj else float(obj["lambda"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad pipe parameters at {where}: {exc}") from exc


def topology_to_json(topology: NetworkTopology) -> dict:
    nodes = {}
    for nid in sorted(topology.nodes):
        node = topology.nodes[nid]
        if isinstance(node, UserNode):
            entry = {"kind": "user",
                     "segments": {k: _pipe_to_json(v)
                                  for k, v in node.segments().items()
                                  if k != "B"}}
            if node.bypass is not None:
                entry["bypass"] = _pipe_to_json(node.bypass)
            if node.building is not None:
                entry["building"] = asdict(node.building)
        else:
            entry = {"kind": "split",
                     "segments": {"F": _pipe_to_json(node.feeding),
                                  "R": _pipe_to_json(node.ret)}}
        if node.position is not None:
            entry["position"] = list(node.position)
        nodes[str(nid)] = entry
    return {"fluid": {"rho": topology.fluid.rho, "cp": topology.fluid.cp},
            "nodes": nodes,
            "edges": [list(e) for e in sorted(topology.edges)]}


def topology_from_json(obj: dict) -> NetworkTopology:
    try:
        fluid = FluidProps(rho=float(obj["fluid"]["rho"]),
                           cp=float(obj["fluid"]["cp"]))
        nodes: dict[int, UserNode | SplitNode] = {}
        for sid, entry in obj["nodes"].items():
            nid = int(sid)
            pos = entry.get("position")
            position = None if pos is None else (float(pos[0]), float(pos[1]))
            segs = entry["segments"]
            if entry["kind"] == "user":
                building = None
                if entry.get("building") is not None:
                    b = entry["building"]
                    building = BuildingParams(
                        hA_s_hex=float(b["hA_s_hex"]),
                        hA_s_env=float(b["hA_s_env"]),
                        thermal_capacity=float(b["thermal_capacity"]))
                bypass = None
                if entry.get("bypass") is not None:
                    bypass = _pipe_from_json(entry["bypass"], f"node {nid} B")
                nodes[nid] = UserNode(
                    feeding=_pipe_from_json(segs["F"], f"node {nid} F"),
                    s1=_pipe_from_json(segs["S1"], f"node {nid} S1"),
                    s2=_pipe_from_json(segs["S2"], f"node {nid} S2"),
                    s3=_pipe_from_json(segs["S3"], f"node {nid} S3"),
                    ret=_pipe_from_json(segs["R"], f"node {nid} R"),
                    bypass=bypass, building=building, position=position)
            elif entry["kind"] == "split":
                nodes[nid] = SplitNode(
                    feeding=_pipe_from_json(segs["F"], f"node {nid} F"),
                    ret=_pipe_from_json(segs["R"], f"node {nid} R"),
                    position=position)
            else:
                raise SchemaError(f"node {nid}: unknown kind {entry['kind']!r}")
        edges = frozenset((int(a), int(b)) for a, b in obj["edges"])
        return NetworkTopology(nodes=nodes, edges=edges, fluid=fluid)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed network file: {exc}") from exc


def load_network(path: str | Path) -> NetworkTopology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_json(json.load(fh))


def save_network(topology: NetworkTopology, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(topology_to_json(topology), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# scenario CSV
#
# Header: t, T0, Tamb, mdot0, then any of  mdotU:<user>  Qb:<user>
# Tset:<user>  meas:<state label>. Time must be uniformly spaced.

def load_scenario(path: str | Path) -> Scenario:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {name: [] for name in header}
        for row in reader:
            if not row:
                continue
            for name, value in zip(header, row):
                cols[name].append(float(value))
    required = ("t", "T0", "Tamb", "mdot0")
    missing = [c for c in required if c not in cols]
    if missing:
        raise SchemaError(f"scenario is missing columns {missing}")
    t = np.asarray(cols["t"])
    if len(t) < 2:
        raise SchemaError("scenario needs at least two samples")
    steps = np.diff(t)
    dt = float(steps[0])
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-9, atol=1e-9):
        raise SchemaError("scenario time column must be uniformly spaced")

    draws: dict[int, np.ndarray] = {}
    demands: dict[int, np.ndarray] = {}
    setpoints: dict[int, np.ndarray] = {}
    measured: dict[str, np.ndarray] = {}
    for name, values in cols.items():
        arr = np.asarray(values)
        if name.startswith("mdotU:"):
            draws[int(name.split(":", 1)[1])] = arr
        elif name.startswith("Qb:"):
            demands[int(name.split(":", 1)[1])] = arr
        elif name.startswith("Tset:"):
            setpoints[int(name.split(":", 1)[1])] = arr
        elif name.startswith("meas:"):
            measured[name.split(":", 1)[1]] = arr
    return Scenario(
        dt=dt,
        supply_temperature=np.asarray(cols["T0"]),
        ambient_temperature=np.asarray(cols["Tamb"]),
        supply_flow=np.asarray(cols["mdot0"]),
        user_draws=draws or None,
        heat_demands=demands or None,
        setpoints=setpoints or None,
        measured=measured or None)


# ---------------------------------------------------------------------------
# result writers

def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_model_csv(model: StateSpaceModel, outdir: str | Path) -> list[Path]:
    """Write A/B/E as labeled CSV plus the state index map."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    labels = list(model.labels)
    a = model.a_dense()
    e = model.e_dense()
    b = model.b_dense()
    paths = []
    paths.append(outdir / "A.csv")
    _write_csv(paths[-1], ["state"] + labels,
               ([lab] + [_fmt(v) for v in a[i]] for i, lab in enumerate(labels)))
    paths.append(outdir / "B.csv")
    _write_csv(paths[-1], ["state", "T0"],
               ([lab, _fmt(b[i, 0])] for i, lab in enumerate(labels)))
    e_cols = ["Tamb"] + [f"Qb:{u}" for u in model.user_ids]
    paths.append(outdir / "E.csv")
    _write_csv(paths[-1], ["state"] + e_cols,
               ([lab] + [_fmt(v) for v in e[i]] for i, lab in enumerate(labels)))
    index_rows = [[str(i), model.labels[i], str(node), seg]
                  for (node, seg), i in sorted(model.index.items(),
                                               key=lambda kv: kv[1])]
    paths.append(outdir / "index_map.csv")
    _write_csv(paths[-1], ["row", "label", "node", "segment"], index_rows)
    return paths


def write_trajectories_csv(result: SimResult, path: str | Path):
    header = ["t"] + list(result.labels)
    rows = ([_fmt(result.times[i])] + [_fmt(v) for v in result.states[i]]
            for i in range(len(result.times)))
    _write_csv(Path(path), header, rows)


def write_user_flows_csv(result: SimResult, path: str | Path):
    header = ["t"] + [f"mdotU:{u}" for u in result.user_ids]
    rows = ([_fmt(result.times[i])] + [_fmt(v) for v in result.user_flows[i]]
            for i in range(result.user_flows.shape[0]))
    _write_csv(Path(path), header, rows)


def write_summary_json(result: SimResult, scenario: Scenario,
                       path: str | Path):
    from .simulation import nrmse
    summary: dict = {
        "steps": int(len(result.times) - 1),
        "matrix_rebuilds": result.diagnostics.get("matrix_rebuilds"),
        "saturation_steps": int(np.count_nonzero(result.saturated)),
    }
    if scenario.measured:
        errors = {}
        for label, series in scenario.measured.items():
            if label in result.labels:
                errors[label] = nrmse(result.series(label)[1:],
                                      np.asarray(series))
        summary["nrmse"] = errors
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


def write_calibration_csv(result: CalibrationResult, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / "h_table.csv"]
    _write_csv(paths[-1], ["node", "segment", "hA_s_W_per_K"],
               ([str(node), seg, _fmt(h)]
                for (node, seg), h in sorted(result.h.items())))
    paths.append(outdir / "calibration_history.csv")
    _write_csv(paths[-1], ["evaluation", "best_objective"],
               ([str(i + 1), _fmt(v)] for i, v in enumerate(result.history)))
    return paths


def site_to_json(site: SiteSpec) -> dict:
    return {
        "plant": list(site.plant),
        "users": [list(p) for p in site.users],
        "parameters": {
            "mdot0": site.supply_flow, "rho": site.rho, "cp": site.cp,
            "T0": site.supply_temperature, "Tamb": site.ambient_temperature,
            "D_L": site.diameter_large, "D_S": site.diameter_small,
            "h": site.h,
        },
    }


def site_from_json(obj: dict) -> tuple[SiteSpec, dict]:
    """Load a site file; returns the spec plus optional generation limits
    ({"max_candidates": ..., "combine_radius": ...}) stored alongside."""
    try:
        p = obj.get("parameters", {})
        site = SiteSpec(
            plant=tuple(obj["plant"]),
            users=tuple(tuple(u) for u in obj["users"]),
            supply_flow=float(p.get("mdot0", 20.0)),
            rho=float(p.get("rho", 971.0)),
            cp=float(p.get("cp", 4179.0)),
            supply_temperature=float(p.get("T0", 80.0)),
            ambient_temperature=float(p.get("Tamb", -5.0)),
            diameter_large=float(p.get("D_L", 0.40)),
            diameter_small=float(p.get("D_S", 0.15)),
            h=float(p.get("h", 1.5)))
        limits = {}
        if "max_candidates" in obj:
            limits["max_candidates"] = int(obj["max_candidates"])
        if "combine_radius" in obj:
            limits["combine_radius"] = float(obj["combine_radius"])
        return site, limits
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed site file: {exc}") from exc


def load_site(path: str | Path) -> tuple[SiteSpec, dict]:
    with open(path, encoding="utf-8") as fh:
        return site_from_json(json.load(fh))


def design_to_json(result: DesignResult) -> dict:
    splits = []
    for cid in sorted(result.tree.candidates):
        cand = result.tree.candidates[cid]
        splits.append({"id": cid, "kind": cand.kind,
                       "position": list(cand.position),
                       "children": [format_key(c) for c in cand.children]})
    return {
        "objective": result.objective,
        "true_cost_W": result.true_cost,
        "total_length_m": result.total_length,
        "delta_t_max_K": result.delta_t_max,
        "iterations": result.iterations,
        "trees_evaluated": result.trees_evaluated,
        "trees_pruned": result.trees_pruned,
        "edges": [[format_key(a), format_key(b)] for a, b in result.edges],
        "split_nodes": splits,
    }


def write_design_json(result: DesignResult, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(design_to_json(result), fh, indent=2)
        fh.write("\n")


def write_pipes_csv(result: DesignResult, path: str | Path):
    header = ["from", "to", "length_m", "diameter_m", "mdot_kg_s",
              "T_in", "T_out", "loss_W"]
    rows = ([p.parent, p.child, _fmt(p.length), _fmt(p.diameter),
             _fmt(p.flow), _fmt(p.t_in), _fmt(p.t_out), _fmt(p.loss)]
            for p in result.pipes)
    _write_csv(Path(path), header, rows)
