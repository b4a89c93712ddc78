"""Command line interface: validate, assemble, simulate, calibrate, optimize.

Errors exit nonzero with a machine-readable JSON object on stderr:
{"error": {"code": ..., "message": ..., "location": ...}}.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from . import plots
from .assembly import assemble
from .calibration import calibrate_h
from .errors import DhnError
from .hydraulics import ideal_flow_split, solve_flow_split
from .optimizer import branch_and_bound, build_problem_graph, \
    generate_candidates, length_baseline, optimize
from .simulation import PidConfig, simulate, simulate_closed_loop
from .topology import node_sets, validate


class CliError(DhnError):
    def __init__(self, code: str, message: str, location: str | None = None):
        super().__init__(message)
        self.code = code
        self.location = location


def _fail(code: str, message: str, location: str | None = None) -> int:
    payload = {"error": {"code": code, "message": message,
                         "location": location}}
    print(json.dumps(payload), file=sys.stderr)
    return 1


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    topo = dio.load_network(args.network)
    violations = validate(topo)
    print(f"{len(violations)} violations")
    for v in violations:
        print(f"  {v}")
    return 0 if not violations else 1


def _draws_from_args(args, users) -> dict[int, float]:
    draws = {}
    for spec in args.draw or ():
        user, _, value = spec.partition("=")
        draws[int(user)] = float(value)
    missing = [u for u in users if u not in draws]
    if missing:
        raise CliError("flows", f"missing --draw for users {missing}")
    return draws


def cmd_assemble(args) -> int:
    topo = dio.load_network(args.network)
    sets = node_sets(topo)
    if args.ideal_split:
        flows = ideal_flow_split(topo, args.supply_flow, sets=sets)
    else:
        draws = _draws_from_args(args, sets.users)
        flows = solve_flow_split(topo, args.supply_flow, draws, sets=sets)
    model = assemble(topo, flows, sets=sets)
    paths = dio.write_model_csv(model, _outdir(args))
    for p in paths:
        print(p)
    return 0


def cmd_simulate(args) -> int:
    topo = dio.load_network(args.network)
    scenario = dio.load_scenario(args.scenario)
    if args.dt is not None and abs(args.dt - scenario.dt) > 1e-12:
        raise CliError("scenario", f"--dt {args.dt} does not match the "
                                   f"scenario spacing {scenario.dt}")
    out = _outdir(args)
    if scenario.setpoints:
        pid = PidConfig(kp=args.kp, ki=args.ki, kd=args.kd,
                        m_min=args.m_min, m_max=args.m_max)
        result = simulate_closed_loop(topo, scenario, pid, mode=args.mode)
    else:
        result = simulate(topo, scenario,
                          couple_buildings=args.couple_buildings)
    dio.write_trajectories_csv(result, out / "trajectories.csv")
    dio.write_user_flows_csv(result, out / "user_flows.csv")
    dio.write_summary_json(result, scenario, out / "summary.json")
    plots.save_trajectory_figure(result, out / "trajectories.png")
    print(out / "trajectories.csv")
    print(out / "summary.json")
    return 0


def cmd_calibrate(args) -> int:
    topo = dio.load_network(args.network)
    scenario = dio.load_scenario(args.scenario)
    segments = None
    if args.segments:
        segments = []
        for part in args.segments.split(","):
            node, _, seg = part.strip().partition(":")
            segments.append((int(node), seg))
    result = calibrate_h(topo, scenario, (args.h_lo, args.h_hi),
                         segments=segments, seed=args.seed,
                         starts=args.starts, max_evals=args.max_evals)
    out = _outdir(args)
    paths = dio.write_calibration_csv(result, out)
    plots.save_calibration_figure(result, out / "calibration.png")
    print(f"objective {result.objective:.6g} "
          f"(initial {result.initial_objective:.6g}, "
          f"{result.evaluations} evaluations)")
    for p in paths:
        print(p)
    return 0


def cmd_optimize(args) -> int:
    site, limits = dio.load_site(args.site)
    max_candidates = args.max_candidates
    if max_candidates is None:
        max_candidates = limits.get("max_candidates")
    radius = limits.get("combine_radius")
    out = _outdir(args)
    candidates = (generate_candidates(site, max_nodes=max_candidates,
                                      combine_radius=radius)
                  if site.n_users >= 2 else ())

    loss = optimize(site, args.delta_t_init, candidates=candidates)
    length = length_baseline(site, candidates)
    primary = loss if args.objective == "loss" else length
    for tag, res in (("loss", loss), ("length", length)):
        dio.write_design_json(res, out / f"design_{tag}.json")
        dio.write_pipes_csv(res, out / f"pipes_{tag}.csv")
        plots.save_layout_figure(res, site, out / f"layout_{tag}.png")
    dio.write_design_json(primary, out / "design.json")
    summary = {
        "objective": args.objective,
        "loss_minimized": {"true_cost_W": loss.true_cost,
                           "total_length_m": loss.total_length},
        "length_minimized": {"true_cost_W": length.true_cost,
                             "total_length_m": length.total_length},
        "loss_reduction": 1.0 - loss.true_cost / length.true_cost
        if length.true_cost > 0 else 0.0,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(out / "design.json")
    print(f"loss-minimized {loss.true_cost:.6g} W over "
          f"{loss.total_length:.6g} m; length-minimized "
          f"{length.true_cost:.6g} W over {length.total_length:.6g} m")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dhnkit",
        description="District heating network modeling, simulation, and "
                    "layout design")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file")
    p.add_argument("--network", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("assemble", help="write the state-space matrices")
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--supply-flow", type=float, required=True)
    p.add_argument("--draw", action="append", metavar="USER=KGPS",
                   help="valve draw per user; repeatable")
    p.add_argument("--ideal-split", action="store_true",
                   help="use the ideally balanced flow split")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("simulate", help="run a scenario")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dt", type=float, default=None,
                   help="must match the scenario time spacing when given")
    p.add_argument("--mode", choices=("setpoint", "track"),
                   default="setpoint")
    p.add_argument("--couple-buildings", action="store_true")
    p.add_argument("--kp", type=float, default=0.05)
    p.add_argument("--ki", type=float, default=0.001)
    p.add_argument("--kd", type=float, default=0.0)
    p.add_argument("--m-min", type=float, default=0.0)
    p.add_argument("--m-max", type=float, default=np.inf)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit heat-transfer coefficients")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--h-lo", type=float, required=True)
    p.add_argument("--h-hi", type=float, required=True)
    p.add_argument("--segments", default=None,
                   help="comma list like '1:F,1:S2,3:R' (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--starts", type=int, default=3)
    p.add_argument("--max-evals", type=int, default=500)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("optimize", help="design the network layout")
    p.add_argument("--site", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=("loss", "length"), default="loss")
    p.add_argument("--delta-t-init", type=float, default=0.0)
    p.add_argument("--max-candidates", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_optimize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.location)
    except dio.SchemaError as exc:
        return _fail("schema", str(exc))
    except FileNotFoundError as exc:
        return _fail("io", str(exc), getattr(exc, "filename", None))
    except DhnError as exc:
        return _fail("solver", str(exc))


if __name__ == "__main__":
    sys.exit(main())
