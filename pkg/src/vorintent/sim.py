"""Deterministic discrete-time world: robot fleet motion over the ground
node lattice (pseudo-random, cyclic-deterministic or scripted), a scripted
worker with dwell/turn events, localisation-noise injection, and the tick
loop that drives planner updates and the intention estimator.

All motion is evaluated analytically from segment breakpoint times, never
by accumulating per-tick increments, so that a recorded stream replayed
offline reproduces the in-loop pose sequence bit for bit.
"""

from __future__ import annotations

import gc
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import IntentionEstimator, UpdateResult
from .floorplan import LayoutDocument, OccupancyGrid, distance_transform, parse_layout, rasterize
from .hmm import HmmParams
from .messages import RobotPathMessage, parse_robot_messages
from .planner import RobotDisk
from .validation import ValidationConfig, WorkerPose, wrap_angle
from .voronoi import DEFAULT_MIN_CLEARANCE, build_skeleton, extract_graph

log = logging.getLogger("vorintent.sim")

GOAL_REACH_RADIUS = 0.4


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ground node lattice

class Lattice:
    """Named ground nodes with adjacency inferred from the dominant node
    pitch. Robots traverse this lattice; S-nodes under racks may be
    isolated (robots parked there simply stay)."""

    def __init__(self, nodes: dict[str, tuple[float, float]]):
        self.nodes = dict(nodes)
        ids = sorted(self.nodes)
        self.adjacency: dict[str, list[str]] = {nid: [] for nid in ids}
        if len(ids) >= 2:
            pts = np.array([self.nodes[nid] for nid in ids])
            d = np.hypot(pts[:, None, 0] - pts[None, :, 0],
                         pts[:, None, 1] - pts[None, :, 1])
            np.fill_diagonal(d, np.inf)
            pitch = float(d.min())
            self.pitch = pitch
            close = d <= pitch * 1.001
            for i, nid in enumerate(ids):
                self.adjacency[nid] = [ids[j] for j in np.nonzero(close[i])[0]]
        else:
            self.pitch = 1.0

    @classmethod
    def from_layout(cls, layout: LayoutDocument) -> "Lattice":
        return cls({nid: (n.x, n.y) for nid, n in layout.nodes.items()})

    def distance(self, a: str, b: str) -> float:
        (ax, ay), (bx, by) = self.nodes[a], self.nodes[b]
        return math.hypot(bx - ax, by - ay)


# ---------------------------------------------------------------------------
# Robots

@dataclass
class RobotState:
    id: str
    node: str                      # last reached node
    radius: float = 1.0
    speed: float = 1.0
    model: str = "random"          # random | deterministic | scripted
    prev: str | None = None
    target: str | None = None
    depart_t: float = 0.0
    arrive_t: float = 0.0
    waypoints: list[tuple[float, str]] | None = None   # scripted only
    warned_isolated: bool = False

    def pose(self, lattice: Lattice, t: float) -> tuple[float, float]:
        if self.model == "scripted":
            return self._scripted_pose(lattice, t)
        if self.target is None or t <= self.depart_t:
            return lattice.nodes[self.node]
        if t >= self.arrive_t:
            return lattice.nodes[self.target]
        f = (t - self.depart_t) / (self.arrive_t - self.depart_t)
        (ax, ay) = lattice.nodes[self.node]
        (bx, by) = lattice.nodes[self.target]
        return (ax + (bx - ax) * f, ay + (by - ay) * f)

    def _scripted_pose(self, lattice: Lattice, t: float) -> tuple[float, float]:
        wp = self.waypoints
        if not wp:
            return lattice.nodes[self.node]
        if t <= wp[0][0]:
            return lattice.nodes[wp[0][1]]
        for (t0, n0), (t1, n1) in zip(wp, wp[1:]):
            if t <= t1:
                if n0 == n1 or t1 == t0:
                    return lattice.nodes[n1]
                f = (t - t0) / (t1 - t0)
                (ax, ay), (bx, by) = lattice.nodes[n0], lattice.nodes[n1]
                return (ax + (bx - ax) * f, ay + (by - ay) * f)
        return lattice.nodes[wp[-1][1]]


class RobotFleet:
    """Node-reservation fleet protocol: a robot holds its current node and
    its selected target; a contested selection waits (lower robot id wins
    by processing order). A robot never returns to its previous node unless
    that is the only option."""

    def __init__(self, robots: list[RobotState], lattice: Lattice,
                 rng: np.random.Generator):
        self.robots = sorted(robots, key=lambda r: r.id)
        self.lattice = lattice
        self.rng = rng
        self.reservations: dict[str, str] = {}
        for r in self.robots:
            if r.model != "scripted":
                if r.node in self.reservations:
                    raise ScenarioError(
                        f"robots {self.reservations[r.node]!r} and {r.id!r} "
                        f"start on the same node {r.node!r}")
                self.reservations[r.node] = r.id
        self.warnings: list[str] = []

    def step(self, t: float) -> None:
        """Advance the fleet to time t: process arrivals, then selections,
        in robot id order."""
        for r in self.robots:
            if r.model == "scripted" or r.target is None:
                continue
            if t >= r.arrive_t:
                if self.reservations.get(r.node) == r.id:
                    del self.reservations[r.node]
                r.prev = r.node
                r.node = r.target
                r.target = None
        for r in self.robots:
            if r.model == "scripted" or r.target is not None:
                continue
            self._select(r, t)

    def _select(self, r: RobotState, t: float) -> None:
        neigh = self.lattice.adjacency[r.node]
        if not neigh:
            if not r.warned_isolated:
                r.warned_isolated = True
                self.warnings.append(f"robot {r.id} parked on isolated node {r.node}")
            return
        candidates = [n for n in neigh if n != r.prev]
        if not candidates:
            candidates = [r.prev]
        if r.model == "random":
            pick = candidates[int(self.rng.integers(len(candidates)))]
        else:
            pick = candidates[0]
        if pick in self.reservations:
            return  # stops and waits for it to pass
        self.reservations[pick] = r.id
        r.target = pick
        r.depart_t = t
        r.arrive_t = t + self.lattice.distance(r.node, pick) / r.speed

    def disks(self, t: float) -> list[RobotDisk]:
        out = []
        for r in self.robots:
            x, y = r.pose(self.lattice, t)
            out.append(RobotDisk(id=r.id, x=x, y=y, radius=r.radius))
        return out

    def occupied_nodes(self) -> list[tuple[str, str]]:
        """(node, robot) pairs currently reserved; test hook for the
        no-collision invariant."""
        return sorted(self.reservations.items())


# ---------------------------------------------------------------------------
# Worker script

@dataclass
class _Segment:
    t0: float
    t1: float
    kind: str                      # move | turn | dwell
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 0.0
    y1: float = 0.0
    theta0: float = 0.0
    theta1: float = 0.0


class WorkerScript:
    """Piecewise-analytic worker motion compiled from a scenario script.

    Steps: {"goto": "R7" | [x, y], "speed": m/s}, {"dwell": s},
    {"turn_to": radians, "rate": rad/s}, {"mark": "label"}.
    """

    def __init__(self, start: tuple[float, float], heading: float,
                 steps: list[dict], layout: LayoutDocument, speed: float = 0.8,
                 turn_rate: float = math.pi):
        self.segments: list[_Segment] = []
        self.marks: list[tuple[float, str]] = []
        x, y, theta, t = start[0], start[1], heading, 0.0
        for step in steps:
            if "goto" in step:
                tx, ty = self._resolve(step["goto"], layout)
                v = float(step.get("speed", speed))
                if v <= 0:
                    raise ScenarioError("goto speed must be positive")
                dist = math.hypot(tx - x, ty - y)
                if dist > 0:
                    theta = math.atan2(ty - y, tx - x)
                    t1 = t + dist / v
                    self.segments.append(_Segment(t, t1, "move", x, y, tx, ty,
                                                  theta, theta))
                    x, y, t = tx, ty, t1
            elif "dwell" in step:
                dt = float(step["dwell"])
                if dt < 0:
                    raise ScenarioError("dwell must be non-negative")
                t1 = t + dt
                self.segments.append(_Segment(t, t1, "dwell", x, y, x, y, theta, theta))
                t = t1
            elif "turn_to" in step:
                target = wrap_angle(float(step["turn_to"]))
                rate = float(step.get("rate", turn_rate))
                delta = wrap_angle(target - theta)
                t1 = t + abs(delta) / rate if rate > 0 else t
                self.segments.append(_Segment(t, t1, "turn", x, y, x, y,
                                              theta, theta + delta))
                theta, t = target, t1
            elif "mark" in step:
                self.marks.append((t, str(step["mark"])))
            else:
                raise ScenarioError(f"unknown worker script step: {step}")
        self.end_t = t
        self._final = (x, y, theta)

    @staticmethod
    def _resolve(target, layout: LayoutDocument) -> tuple[float, float]:
        if isinstance(target, str):
            if target not in layout.nodes:
                raise ScenarioError(f"worker script references unknown node {target!r}")
            return layout.node_position(target)
        return (float(target[0]), float(target[1]))

    def pose(self, t: float) -> WorkerPose:
        if not self.segments or t <= self.segments[0].t0:
            if self.segments:
                s = self.segments[0]
                return WorkerPose(s.x0, s.y0, wrap_angle(s.theta0), t)
            x, y, theta = self._final
            return WorkerPose(x, y, wrap_angle(theta), t)
        for s in self.segments:
            if t <= s.t1:
                f = 0.0 if s.t1 == s.t0 else (t - s.t0) / (s.t1 - s.t0)
                if s.kind == "move":
                    return WorkerPose(s.x0 + (s.x1 - s.x0) * f,
                                      s.y0 + (s.y1 - s.y0) * f,
                                      wrap_angle(s.theta0), t)
                if s.kind == "turn":
                    return WorkerPose(s.x0, s.y0,
                                      wrap_angle(s.theta0 + (s.theta1 - s.theta0) * f), t)
                return WorkerPose(s.x0, s.y0, wrap_angle(s.theta0), t)
        x, y, theta = self._final
        return WorkerPose(x, y, wrap_angle(theta), t)

    def marks_between(self, t0: float, t1: float) -> list[str]:
        """Marks whose time falls in (t0, t1]."""
        return [label for (tm, label) in self.marks if t0 < tm <= t1]


# ---------------------------------------------------------------------------
# Noise

@dataclass
class NoiseModel:
    pos_std: float = 0.0
    heading_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def apply(self, pose: WorkerPose) -> WorkerPose:
        if self.pos_std == 0.0 and self.heading_std == 0.0:
            return pose
        dx, dy = self._rng.normal(0.0, self.pos_std or 1e-300, 2) if self.pos_std else (0.0, 0.0)
        dth = float(self._rng.normal(0.0, self.heading_std)) if self.heading_std else 0.0
        return WorkerPose(pose.x + dx, pose.y + dy,
                          wrap_angle(pose.theta + dth), pose.t)


# ---------------------------------------------------------------------------
# Scenario

@dataclass
class Scenario:
    name: str
    layout: LayoutDocument
    goals: list[str]
    dt: float = 0.1
    duration: float = 60.0
    seed: int = 0
    cell_size: float | None = None
    min_clearance: float = DEFAULT_MIN_CLEARANCE
    validation: dict = field(default_factory=dict)
    hmm: dict = field(default_factory=dict)
    robots: list[dict] = field(default_factory=list)
    robot_script: list[RobotPathMessage] = field(default_factory=list)
    worker: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    timed_events: list[dict] = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(raw, base_dir=path.parent, name=raw.get("name", path.stem))

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None,
                  name: str = "scenario") -> "Scenario":
        base_dir = base_dir or Path.cwd()
        layout_ref = raw.get("layout")
        if layout_ref is None:
            raise ScenarioError("scenario missing 'layout'")
        if isinstance(layout_ref, dict):
            layout = parse_layout(json.dumps(layout_ref))
        else:
            layout = parse_layout(_resolve_fixture(layout_ref, base_dir).read_text())
        goals = [str(g) for g in raw.get("goals", layout.goals)]
        if not goals:
            raise ScenarioError("scenario declares no goals")
        script_msgs: list[RobotPathMessage] = []
        script_ref = raw.get("robot_script")
        if script_ref:
            lattice = Lattice.from_layout(layout)
            script_msgs = parse_robot_messages(
                _resolve_fixture(script_ref, base_dir).read_text(), lattice)
        return cls(
            name=name,
            layout=layout,
            goals=goals,
            dt=float(raw.get("dt", 0.1)),
            duration=float(raw.get("duration_s", 60.0)),
            seed=int(raw.get("seed", 0)),
            cell_size=raw.get("cell_size_m"),
            min_clearance=float(raw.get("min_clearance_m", DEFAULT_MIN_CLEARANCE)),
            validation=dict(raw.get("validation", {})),
            hmm=dict(raw.get("hmm", {})),
            robots=list(raw.get("robots", [])),
            robot_script=script_msgs,
            worker=dict(raw.get("worker", {})),
            noise=dict(raw.get("noise", {})),
            timed_events=list(raw.get("events", [])),
            raw=raw,
        )

    def validation_config(self) -> ValidationConfig:
        return ValidationConfig(**self.validation)

    def hmm_params(self) -> HmmParams:
        return HmmParams(**self.hmm)


def _resolve_fixture(ref: str, base_dir: Path) -> Path:
    p = Path(ref)
    if p.is_absolute() and p.exists():
        return p
    local = base_dir / p
    if local.exists():
        return local
    packaged = Path(__file__).parent / "fixtures" / p
    if packaged.exists():
        return packaged
    raise ScenarioError(f"cannot resolve referenced file {ref!r}")


def fixture_path(name: str) -> Path:
    return Path(__file__).parent / "fixtures" / name


# ---------------------------------------------------------------------------
# Simulation

@dataclass
class TickOutcome:
    tick: int
    t: float
    true_pose: WorkerPose
    noisy_pose: WorkerPose
    robots: list[RobotDisk]
    update: UpdateResult | None
    events: list[str]
    P: np.ndarray = None
    v_hat: np.ndarray = None
    argmax_label: str = ""
    latency_s: float = 0.0


class Simulation:
    """Strictly single-threaded deterministic tick loop."""

    def __init__(self, scenario: Scenario, seed: int | None = None,
                 robot_model_override: str | None = None,
                 duration_override: float | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.dt = scenario.dt
        self.duration = duration_override if duration_override is not None else scenario.duration
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")

        layout = scenario.layout
        cell = scenario.cell_size or layout.cell_size
        self.grid = rasterize(layout, cell)
        dfield = distance_transform(self.grid)
        skeleton = build_skeleton(dfield, scenario.min_clearance)
        self.graph = extract_graph(skeleton, layout, goals=scenario.goals)
        self.estimator = IntentionEstimator(
            self.grid, self.graph,
            config=scenario.validation_config(),
            params=scenario.hmm_params(),
        )
        self.lattice = Lattice.from_layout(layout)

        rng = np.random.default_rng(self.seed)
        self.fleet = RobotFleet(self._build_robots(robot_model_override), self.lattice, rng)

        w = scenario.worker
        start_ref = w.get("start", None)
        if start_ref is None:
            raise ScenarioError("scenario worker needs a 'start'")
        start = WorkerScript._resolve(start_ref, layout)
        self.worker = WorkerScript(
            start=start,
            heading=float(w.get("heading", 0.0)),
            steps=list(w.get("script", [])),
            layout=layout,
            speed=float(w.get("speed", 0.8)),
        )
        n = scenario.noise
        self.noise = NoiseModel(pos_std=float(n.get("pos_std", 0.0)),
                                heading_std=float(n.get("heading_std", 0.0)),
                                seed=self.seed + 1)
        self.tick_index = 0
        self.t = 0.0
        self.pending_events = sorted(scenario.timed_events, key=lambda e: float(e["t"]))
        self._event_cursor = 0
        self._last_argmax = self.estimator.argmax_label()
        self._goal_hits: set[str] = set()
        self.update_latencies: list[float] = []
        # Seed the estimator's motion reference with the t=0 pose; recorded
        # so offline estimation can replay from the identical state.
        self.initial_pose = self._noisy(self.worker.pose(0.0))
        self.estimator.observe(self.initial_pose, self.fleet.disks(0.0))

    def _build_robots(self, model_override: str | None) -> list[RobotState]:
        robots = []
        scripted_ids = {m.robot for m in self.scenario.robot_script}
        for spec in self.scenario.robots:
            model = spec.get("model", "random")
            if model_override and model != "scripted":
                model = model_override
            start = spec.get("start")
            if start not in self.scenario.layout.nodes:
                raise ScenarioError(f"robot start {start!r} is not a layout node")
            robots.append(RobotState(
                id=str(spec["id"]), node=str(start),
                radius=float(spec.get("radius", 1.0)),
                speed=float(spec.get("speed", 1.0)),
                model=model,
            ))
        for msg in self.scenario.robot_script:
            robots.append(RobotState(
                id=msg.robot, node=msg.waypoints[0][1], model="scripted",
                radius=float(self.scenario.raw.get("scripted_robot_radius", 1.0)),
                waypoints=[(t, n) for (t, n) in msg.waypoints],
            ))
        ids = [r.id for r in robots]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate robot ids")
        del scripted_ids
        return robots

    def _noisy(self, pose: WorkerPose) -> WorkerPose:
        return self.noise.apply(pose)

    def tick(self) -> TickOutcome:
        t_prev = self.t
        self.tick_index += 1
        self.t = self.tick_index * self.dt
        events: list[str] = []

        # timed scenario events (goal add/remove) apply at tick boundaries
        while (self._event_cursor < len(self.pending_events)
               and float(self.pending_events[self._event_cursor]["t"]) <= self.t):
            ev = self.pending_events[self._event_cursor]
            self._event_cursor += 1
            events.extend(self._apply_event(ev))

        self.fleet.step(self.t)
        disks = self.fleet.disks(self.t)
        cut_ids, warnings = self.estimator.planner.sync_robot_obstacles(disks)
        events.extend(f"warning:{w}" for w in warnings)
        events.extend(f"warning:{w}" for w in self.fleet.warnings)
        self.fleet.warnings.clear()

        true_pose = self.worker.pose(self.t)
        noisy = self._noisy(true_pose)
        for label in self.worker.marks_between(t_prev, self.t):
            events.append(f"mark:{label}")

        started = time.perf_counter()
        update = self.estimator.observe(noisy, disks)
        latency = time.perf_counter() - started
        if update is not None:
            self.update_latencies.append(latency)
            if update.label == "Gx" and self._last_argmax != "Gx":
                events.append("irrational_declared")
            self._last_argmax = update.label

        events.extend(self._goal_events(true_pose))
        if self._worker_trapped(true_pose, cut_ids):
            events.append("trapped")
        vh = self.estimator.lowpass.state
        return TickOutcome(tick=self.tick_index, t=self.t, true_pose=true_pose,
                           noisy_pose=noisy, robots=disks, update=update,
                           events=events, P=self.estimator.probabilities,
                           v_hat=vh.copy() if vh is not None else None,
                           argmax_label=self.estimator.argmax_label(),
                           latency_s=latency)

    def _apply_event(self, ev: dict) -> list[str]:
        if "add_goal" in ev:
            spec = ev["add_goal"]
            if "node" in spec:
                x, y = self.scenario.layout.node_position(spec["node"])
                name = spec.get("name", spec["node"])
            else:
                x, y = float(spec["x"]), float(spec["y"])
                name = spec.get("name")
            self.estimator.add_goal(x=x, y=y, name=name)
            return [f"goal_added:{name or f'({x},{y})'}"]
        if "remove_goal" in ev:
            idx = int(ev["remove_goal"])
            label = self.estimator.goal_labels()[idx]
            self.estimator.remove_goal(idx)
            return [f"goal_removed:{label}"]
        raise ScenarioError(f"unknown timed event {ev}")

    def _goal_events(self, pose: WorkerPose) -> list[str]:
        events = []
        for j, nid in enumerate(self.graph.goal_ids):
            node = self.graph.nodes[nid]
            key = node.name or str(nid)
            d = math.hypot(node.pos[0] - pose.x, node.pos[1] - pose.y)
            if d <= GOAL_REACH_RADIUS and key not in self._goal_hits:
                self._goal_hits.add(key)
                events.append(f"goal_reached:{key}")
            elif d > GOAL_REACH_RADIUS * 2 and key in self._goal_hits:
                self._goal_hits.discard(key)
        return events

    def _worker_trapped(self, pose: WorkerPose, cut_ids: set[int]) -> bool:
        if not cut_ids:
            return False
        try:
            nid = self.graph.nearest_node(pose.x, pose.y)
        except Exception:
            return False
        incident = self.graph.adjacency[nid]
        return bool(incident) and all(eid in cut_ids for eid in incident)

    def run(self, progress: bool = False) -> list[TickOutcome]:
        """Run the whole scenario. Automatic garbage collection is paused
        and amortised between ticks so collector pauses never land inside a
        measured estimator update."""
        out = []
        n_ticks = int(round(self.duration / self.dt))
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for k in range(n_ticks):
                out.append(self.tick())
                if k % 200 == 199:
                    gc.collect()
        finally:
            if gc_was_enabled:
                gc.enable()
        return out
