"""File and wire formats: robot path messages (JSON lines), pose logs, and
the frame/command schema shared with the steering UI.

Robot path files carry one JSON object per line::

    {"robot": "r1", "t": 1.5, "node": "R105"}

optionally with explicit {"x": .., "y": ..} overriding the node position.
Per robot, timestamps must be strictly increasing in file order and
consecutive distinct nodes must be adjacent on the ground lattice; a
repeated node encodes waiting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .validation import WorkerPose


class MessageError(ValueError):
    pass


@dataclass
class RobotPathMessage:
    robot: str
    waypoints: list[tuple[float, str]]


def parse_robot_messages(text: str, lattice=None) -> list[RobotPathMessage]:
    """Parse a JSON-lines robot path file, grouped per robot in first-seen
    order. With a lattice given, hops are adjacency-validated."""
    per_robot: dict[str, list[tuple[float, str]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            robot = str(obj["robot"])
            t = float(obj["t"])
            node = str(obj["node"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MessageError(f"malformed robot message at line {lineno}: {exc}") from exc
        wps = per_robot.setdefault(robot, [])
        if wps:
            t_last, node_last = wps[-1]
            if t <= t_last:
                raise MessageError(
                    f"time regression for robot {robot!r} at line {lineno}: "
                    f"{t} after {t_last}")
            if lattice is not None and node != node_last:
                if node not in lattice.nodes:
                    raise MessageError(f"unknown node {node!r} at line {lineno}")
                if node not in lattice.adjacency.get(node_last, []):
                    raise MessageError(
                        f"non-adjacent hop {node_last!r} -> {node!r} for robot "
                        f"{robot!r} at line {lineno}")
        elif lattice is not None and node not in lattice.nodes:
            raise MessageError(f"unknown node {node!r} at line {lineno}")
        wps.append((t, node))
    return [RobotPathMessage(robot=r, waypoints=w) for r, w in per_robot.items()]


# ---------------------------------------------------------------------------
# Pose logs (the estimator-view stream written by `simulate`, consumed by
# `estimate`). First line is a header record echoing the estimator config
# so offline estimation reproduces the in-loop sequence exactly.

def pose_log_header(scenario_raw: dict, seed: int, goals: list[str]) -> str:
    return json.dumps({"type": "header", "seed": seed, "goals": goals,
                       "scenario": scenario_raw}, sort_keys=True)


def pose_log_line(pose: WorkerPose) -> str:
    return json.dumps({"t": pose.t, "x": pose.x, "y": pose.y, "theta": pose.theta})


def parse_pose_log(text: str) -> tuple[dict | None, list[WorkerPose]]:
    header = None
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MessageError(f"malformed pose log line {lineno}: {exc.msg}") from exc
        if obj.get("type") == "header":
            header = obj
            continue
        try:
            poses.append(WorkerPose(float(obj["x"]), float(obj["y"]),
                                    float(obj["theta"]), float(obj["t"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise MessageError(f"malformed pose log line {lineno}: {exc}") from exc
    return header, poses


def robot_log_line(t: float, disks) -> str:
    return json.dumps({"t": t, "robots": [
        {"id": d.id, "x": d.x, "y": d.y, "r": d.radius} for d in disks]})


def parse_robot_log(text: str):
    """Per-tick robot disk snapshots: [{"t":..,"robots":[{id,x,y,r}..]}]."""
    from .planner import RobotDisk
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            disks = [RobotDisk(id=str(r["id"]), x=float(r["x"]), y=float(r["y"]),
                               radius=float(r["r"])) for r in obj["robots"]]
            out.append((float(obj["t"]), disks))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MessageError(f"malformed robot log line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Wire schema (service <-> UI)

def frame_message(tick: int, t: float, worker, robots, goals: list[str],
                  P, v_hat, argmax_label: str, graph_digest: str) -> dict:
    return {
        "type": "frame",
        "tick": tick,
        "t": round(t, 6),
        "worker": {"x": worker.x, "y": worker.y, "theta": worker.theta},
        "robots": [{"id": r.id, "x": r.x, "y": r.y, "r": r.radius} for r in robots],
        "goals": goals,
        "P": [float(p) for p in P],
        "v": [float(x) for x in v_hat] if v_hat is not None else None,
        "argmax": argmax_label,
        "graph_digest": graph_digest,
    }


def parse_command(raw: str) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MessageError(f"malformed command: {exc.msg}") from exc
    kind = obj.get("type")
    if kind == "steer":
        heading = float(obj["heading"])
        speed = float(obj["speed"])
        if not (0.0 <= speed <= 1.0):
            raise MessageError("steer speed must be in [0, 1]")
        return {"type": "steer", "heading": heading, "speed": speed}
    if kind == "add_goal":
        return {"type": "add_goal", "x": float(obj["x"]), "y": float(obj["y"]),
                "name": obj.get("name")}
    if kind == "remove_goal":
        return {"type": "remove_goal", "index": int(obj["index"])}
    if kind in ("pause", "resume"):
        return {"type": kind}
    if kind == "reset":
        return {"type": "reset", "seed": int(obj.get("seed", 0))}
    raise MessageError(f"unknown command type {kind!r}")
