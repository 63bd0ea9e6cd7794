"""Command line interface.

Subcommands: build-gvd, replay, simulate, estimate, serve. Exit codes:
0 success, 1 input error, 2 runtime error. Log level comes from VI_LOG.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("vorintent")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_Input(f"{self.prog}: error: {message}")


class SystemExit_Input(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="vorintent", description=__doc__)
    p.add_argument("--version", action="version", version=f"vorintent {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-gvd", help="build the Voronoi graph from a layout")
    b.add_argument("layout", help="layout JSON file")
    b.add_argument("-o", "--output", default=None, help="graph JSON output path")
    b.add_argument("--cell-size", type=float, default=None, help="grid cell size [m]")
    b.add_argument("--min-clearance", type=float, default=None)
    b.add_argument("--pgm", default=None, help="also dump the occupancy grid as PGM")
    b.add_argument("--dot", default=None, help="also dump the graph as DOT")

    r = sub.add_parser("replay", help="run a scenario offline and write its trace")
    r.add_argument("scenario", help="scenario JSON file")
    r.add_argument("-o", "--output", default=None, help="trace CSV path")
    r.add_argument("--json", dest="json_out", default=None, help="trace JSON path")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--per-tick", action="store_true", help="one record per tick")

    s = sub.add_parser("simulate", help="replay with overrides and optional logs")
    s.add_argument("scenario")
    s.add_argument("-o", "--output", default=None)
    s.add_argument("--robots", choices=["random", "deterministic"], default=None,
                   help="override non-scripted robot motion model")
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--pose-log", default=None, help="write the estimator-view pose stream")
    s.add_argument("--robot-log", default=None, help="write per-tick robot snapshots")

    e = sub.add_parser("estimate", help="offline estimation over recorded streams")
    e.add_argument("layout", help="layout JSON file")
    e.add_argument("pose_log", help="pose stream (JSON lines, with header)")
    e.add_argument("robot_log", help="robot snapshots (JSON lines)")
    e.add_argument("-o", "--output", default=None)

    v = sub.add_parser("serve", help="live simulation service with steering UI")
    v.add_argument("scenario")
    v.add_argument("--port", type=int, default=8008)
    v.add_argument("--bind", default="127.0.0.1")
    v.add_argument("--rt-factor", type=float, default=1.0,
                   help="wall-clock speedup of the tick loop")
    return p


def _cmd_build_gvd(args) -> int:
    from .floorplan import distance_transform, parse_layout, rasterize
    from .voronoi import DEFAULT_MIN_CLEARANCE, build_skeleton, extract_graph

    text = Path(args.layout).read_text()
    layout = parse_layout(text)
    grid = rasterize(layout, args.cell_size)
    dfield = distance_transform(grid)
    skeleton = build_skeleton(dfield, args.min_clearance
                              if args.min_clearance is not None else DEFAULT_MIN_CLEARANCE)
    graph = extract_graph(skeleton, layout)
    out = args.output or (Path(args.layout).stem + ".graph.json")
    Path(out).write_text(json.dumps(graph.to_json(), indent=1) + "\n")
    log.info("graph written to %s (%d nodes, %d edges)", out,
             len(graph.nodes), len(graph.edges))
    if args.pgm:
        Path(args.pgm).write_bytes(grid.to_pgm())
    if args.dot:
        Path(args.dot).write_text(graph.to_dot() + "\n")
    print(out)
    return 0


def _run_to_trace(sim, scenario, seed, per_tick: bool = False):
    from .trace import TraceRecord, TraceWriter

    writer = TraceWriter(
        goal_labels=sim.estimator.goal_labels(),
        header_meta={"scenario": scenario.name, "seed": seed, "dt": sim.dt,
                     "duration_s": sim.duration, "rng": "pcg64",
                     "goals": sim.estimator.goal_labels()},
        per_tick=per_tick,
    )
    outcomes = sim.run()
    final_g = sim.estimator.goal_count
    writer.goal_labels = sim.estimator.goal_labels()
    writer.meta["goals"] = writer.goal_labels
    for o in outcomes:
        if o.update is None and not per_tick and not o.events:
            continue
        rec = TraceRecord(
            t=o.t,
            worker_x=o.noisy_pose.x, worker_y=o.noisy_pose.y,
            worker_theta=o.noisy_pose.theta,
            true_x=o.true_pose.x, true_y=o.true_pose.y, true_theta=o.true_pose.theta,
            v=_pad(o.v_hat, final_g), P=_pad(o.P, final_g + 2),
            argmax=o.argmax_label,
            events=o.events,
            robots=[(r.id, r.x, r.y) for r in o.robots],
        )
        writer.add(rec)
    return writer, outcomes


def _pad(arr, width):
    import numpy as np
    if arr is None:
        return np.full(width, float("nan"))
    if len(arr) < width:
        return np.concatenate([np.asarray(arr, dtype=float),
                               np.full(width - len(arr), float("nan"))])
    return np.asarray(arr, dtype=float)


def _cmd_replay(args) -> int:
    from .sim import Scenario, Simulation

    scenario = Scenario.load(args.scenario)
    seed = args.seed if args.seed is not None else scenario.seed
    sim = Simulation(scenario, seed=seed)
    writer, _ = _run_to_trace(sim, scenario, seed, per_tick=args.per_tick)
    out = args.output or (Path(args.scenario).stem + ".trace.csv")
    Path(out).write_text(writer.to_csv())
    if args.json_out:
        Path(args.json_out).write_text(writer.to_json())
    print(out)
    return 0


def _cmd_simulate(args) -> int:
    from .messages import pose_log_header, pose_log_line, robot_log_line
    from .sim import Scenario, Simulation

    scenario = Scenario.load(args.scenario)
    seed = args.seed if args.seed is not None else scenario.seed
    sim = Simulation(scenario, seed=seed, robot_model_override=args.robots,
                     duration_override=args.duration)
    writer, outcomes = _run_to_trace(sim, scenario, seed)
    out = args.output or (Path(args.scenario).stem + ".trace.csv")
    Path(out).write_text(writer.to_csv())
    if args.pose_log:
        lines = [pose_log_header(scenario.raw, seed, sim.estimator.goal_labels())]
        lines.append(pose_log_line(sim.initial_pose))
        lines += [pose_log_line(o.noisy_pose) for o in outcomes]
        Path(args.pose_log).write_text("\n".join(lines) + "\n")
    if args.robot_log:
        lines = [robot_log_line(o.t, o.robots) for o in outcomes]
        Path(args.robot_log).write_text("\n".join(lines) + "\n")
    print(out)
    return 0


def _cmd_estimate(args) -> int:
    from .estimator import IntentionEstimator
    from .floorplan import distance_transform, parse_layout, rasterize
    from .messages import parse_pose_log, parse_robot_log
    from .sim import Scenario
    from .trace import TraceRecord, TraceWriter
    from .voronoi import build_skeleton, extract_graph

    layout_text = Path(args.layout).read_text()
    header, poses = parse_pose_log(Path(args.pose_log).read_text())
    robot_snaps = parse_robot_log(Path(args.robot_log).read_text())
    if header is None:
        raise SystemExit_Input("pose log has no header record")
    scenario = Scenario.from_dict(dict(header["scenario"], layout=json.loads(layout_text)),
                                  name="estimate")
    grid = rasterize(scenario.layout, scenario.cell_size or scenario.layout.cell_size)
    dfield = distance_transform(grid)
    skeleton = build_skeleton(dfield, scenario.min_clearance)
    graph = extract_graph(skeleton, scenario.layout, goals=list(header["goals"]))
    est = IntentionEstimator(grid, graph, config=scenario.validation_config(),
                             params=scenario.hmm_params())
    robots_at = {round(t, 9): disks for t, disks in robot_snaps}
    writer = TraceWriter(goal_labels=est.goal_labels(),
                         header_meta={"scenario": scenario.name,
                                      "seed": header["seed"], "offline": True,
                                      "goals": est.goal_labels()})
    for pose in poses:
        disks = robots_at.get(round(pose.t, 9), [])
        cut_ids, _ = est.planner.sync_robot_obstacles(disks)
        update = est.observe(pose, disks)
        if update is None:
            continue
        writer.add(TraceRecord(
            t=pose.t, worker_x=pose.x, worker_y=pose.y, worker_theta=pose.theta,
            true_x=pose.x, true_y=pose.y, true_theta=pose.theta,
            v=update.v_hat, P=update.P, argmax=update.label, events=[],
            robots=[(d.id, d.x, d.y) for d in disks]))
    out = args.output or (Path(args.pose_log).stem + ".estimate.csv")
    Path(out).write_text(writer.to_csv())
    print(out)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    from .sim import Scenario

    scenario = Scenario.load(args.scenario)
    app = create_app(scenario, rt_factor=args.rt_factor)
    uvicorn.run(app, host=args.bind, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "build-gvd": _cmd_build_gvd,
    "replay": _cmd_replay,
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("VI_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_Input as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except SystemExit_Input as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # domain validation errors (layout, scenario, messages) are input errors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("runtime error")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
