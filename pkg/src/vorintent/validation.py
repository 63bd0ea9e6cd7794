"""Conversion of a worker pose stream into the per-goal motion-validation
vector that the intention estimator consumes as its observation.

Each update associates the observed pose softly with every visible graph
node (Gaussian in distance, triangular in bearing), folds the association
through the goal-distance matrix into a modulated distance per goal, and
scores the observed pose against a circle of counterfactual poses around
the previous update location: a goal being approached validates near one,
a goal being abandoned validates near zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .floorplan import OccupancyGrid
from .planner import Raycaster, RobotDisk, line_of_sight
from .voronoi import VoronoiGraph

PI = math.pi


def wrap_angle(theta: float) -> float:
    """Wrap into [-pi, pi)."""
    return (theta + PI) % (2.0 * PI) - PI


@dataclass(frozen=True)
class WorkerPose:
    x: float
    y: float
    theta: float
    t: float = 0.0


@dataclass
class ValidationConfig:
    sigma_sq: float = 0.005            # association Gaussian variance [m^2]
    m_circle: int = 16                 # counterfactual points on the circle
    n_headings: int = 8                # counterfactual headings, pi/4 spaced
    lowpass_coeff: float = 0.4         # first-order filter coefficient
    trigger_cell: float = 0.1          # position trigger grid [m]
    trigger_angle: float = PI / 8      # orientation trigger [rad]
    motion_epsilon: float = 0.01       # below this no update happens [m]
    gaussian_distance_scale: float = 1.0
    # Relative position-weight below which a node cannot influence the
    # normalised association; line-of-sight tests are skipped for those.
    los_weight_cutoff: float = 1e-15

    def __post_init__(self):
        if not (0.0 < self.lowpass_coeff <= 1.0):
            raise ValueError("lowpass_coeff must be in (0, 1]")
        if self.sigma_sq <= 0 or self.m_circle <= 0 or self.n_headings <= 0:
            raise ValueError("sigma_sq, m_circle and n_headings must be positive")
        if self.trigger_cell <= 0 or self.trigger_angle <= 0 or self.motion_epsilon <= 0:
            raise ValueError("trigger thresholds must be positive")

    def headings(self) -> np.ndarray:
        """The counterfactual heading set; -pi and +pi coincide so the
        default is 8 distinct headings."""
        k = self.n_headings
        return -PI + np.arange(k) * (2.0 * PI / k)


def triangular(theta: float) -> float:
    """Bearing modulation (pi - |theta|) / pi^2 for theta in [-pi, pi]."""
    return (PI - abs(theta)) / (PI * PI)


class AssociationContext:
    """Precomputed node geometry for fast repeated association against one
    graph state. Rebuild after any graph mutation."""

    def __init__(self, graph: VoronoiGraph, grid: OccupancyGrid):
        self.graph = graph
        self.grid = grid
        self.order = graph.order()
        self.positions = graph.positions(self.order)
        clearance = graph.skeleton.clearance
        if clearance is None or clearance.shape != grid.occupied.shape:
            clearance = None  # graph built against a different grid
        self.raycaster = Raycaster(grid, clearance=clearance)

    def nearest_node_index(self, x: float, y: float) -> int:
        nid = self.graph.nearest_node(x, y)
        return self.order.index(nid)


def _position_weights(points: np.ndarray, positions: np.ndarray,
                      cfg: ValidationConfig) -> np.ndarray:
    """exp(-(d*scale)^2 / (2 sigma^2)) for every (point, node) pair."""
    diff = positions[None, :, :] - points[:, None, :]
    d = np.hypot(diff[:, :, 0], diff[:, :, 1]) * cfg.gaussian_distance_scale
    return np.exp(-(d * d) / (2.0 * cfg.sigma_sq))


def _visibility(points: np.ndarray, ctx: AssociationContext,
                robots: list[RobotDisk], cfg: ValidationConfig,
                wpos: np.ndarray) -> np.ndarray:
    """Line-of-sight matrix over (point, node) pairs.

    Only nodes whose position weight is within `los_weight_cutoff` of the
    point's maximum can survive normalisation, so rays are cast for those
    candidate pairs only; a point whose candidates all turn out occluded
    falls back to testing its remaining nodes. All pairs go through the
    batched blocked/clear screens; only unresolved grazes pay for the exact
    supercover traversal."""
    rc = ctx.raycaster
    vis = np.zeros(wpos.shape, dtype=bool)
    robot_arr = (np.array([[r.x, r.y, r.radius] for r in robots])
                 if robots else None)

    def cast(pi: np.ndarray, ni: np.ndarray) -> None:
        if len(pi) == 0:
            return
        origins = points[pi]
        targets = ctx.positions[ni]
        alive = np.ones(len(pi), dtype=bool)
        if robot_arr is not None:
            alive = ~Raycaster.robots_blocked_pairs(origins, targets, robot_arr)
            pi, ni, origins, targets = pi[alive], ni[alive], origins[alive], targets[alive]
            if len(pi) == 0:
                return
        blocked, clear = rc.screen(origins, targets)
        vis[pi[clear], ni[clear]] = True
        unsure = ~(blocked | clear)
        for k in np.nonzero(unsure)[0]:
            a = (float(origins[k, 0]), float(origins[k, 1]))
            b = (float(targets[k, 0]), float(targets[k, 1]))
            if rc.clear_exact(a, b):
                vis[pi[k], ni[k]] = True

    cand = wpos >= wpos.max(axis=1, keepdims=True) * cfg.los_weight_cutoff
    pi, ni = np.nonzero(cand)
    cast(pi, ni)
    # points with every weight-relevant node occluded: try the rest before
    # the association fallback takes over
    occluded = ~vis.any(axis=1)
    if occluded.any():
        pi, ni = np.nonzero(~cand & occluded[:, None])
        cast(pi, ni)
    return vis


def _bearing_factors(points: np.ndarray, headings: np.ndarray,
                     positions: np.ndarray) -> np.ndarray:
    """Triangular bearing factor for every (point, heading, node) triple;
    shape (P, H, n)."""
    diff = positions[None, :, :] - points[:, None, :]
    bearing = np.arctan2(diff[:, :, 1], diff[:, :, 0])     # (P, n)
    rel = bearing[:, None, :] - headings[None, :, None]    # (P, H, n)
    rel = (rel + PI) % (2.0 * PI) - PI
    return (PI - np.abs(rel)) / (PI * PI)


def _normalize_rows(raw: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """L1-normalise each row; rows with no visible mass fall back to the
    given one-hot assignment (nearest graph-snapped node)."""
    sums = raw.sum(axis=1, keepdims=True)
    dead = sums[:, 0] == 0.0
    out = np.divide(raw, np.where(sums == 0.0, 1.0, sums))
    if dead.any():
        out[dead] = fallback[dead]
    return out


def associate(pose: WorkerPose, ctx: AssociationContext,
              robots: list[RobotDisk], cfg: ValidationConfig) -> np.ndarray:
    """Association vector c over nodes in graph order for a single pose."""
    points = np.array([[pose.x, pose.y]])
    headings = np.array([pose.theta])
    wpos = _position_weights(points, ctx.positions, cfg)
    vis = _visibility(points, ctx, robots, cfg, wpos)
    phi = _bearing_factors(points, headings, ctx.positions)[:, 0, :]
    raw = wpos * vis * phi
    fallback = np.zeros_like(raw)
    if raw.sum() == 0.0:
        fallback[0, ctx.nearest_node_index(pose.x, pose.y)] = 1.0
    return _normalize_rows(raw, fallback)[0]


def associate_counterfactuals(points: np.ndarray, ctx: AssociationContext,
                              robots: list[RobotDisk],
                              cfg: ValidationConfig) -> np.ndarray:
    """Association rows for every (circle point x heading) combination;
    shape (P*H, n). Line of sight is evaluated once per point and shared
    across its headings."""
    headings = cfg.headings()
    wpos = _position_weights(points, ctx.positions, cfg)      # (P, n)
    vis = _visibility(points, ctx, robots, cfg, wpos)
    phi = _bearing_factors(points, headings, ctx.positions)   # (P, H, n)
    raw = (wpos * vis)[:, None, :] * phi                      # (P, H, n)
    P, H, n = raw.shape
    raw = raw.reshape(P * H, n)
    fallback = np.zeros_like(raw)
    row_sums = raw.sum(axis=1)
    if (row_sums == 0.0).any():
        for p in range(P):
            rows = slice(p * H, (p + 1) * H)
            if (row_sums[rows] == 0.0).any():
                j = ctx.nearest_node_index(float(points[p, 0]), float(points[p, 1]))
                fallback[rows, j] = 1.0
    return _normalize_rows(raw, fallback)


def modulated_goal_distance(c: np.ndarray, F: np.ndarray) -> np.ndarray:
    """d = c F I; goals sit in the last columns so I reduces to selecting
    the goal columns, which F already is."""
    return c @ F


def alternative_points(l_prev: tuple[float, float], l: tuple[float, float],
                       cfg: ValidationConfig) -> np.ndarray | None:
    """Equidistant points on the circle around the previous update location
    through the current one. None signals insignificant motion (the caller
    skips the whole update). The first point lies at the bearing of actual
    motion, so the observed position itself is always in the set."""
    dx, dy = l[0] - l_prev[0], l[1] - l_prev[1]
    r = math.hypot(dx, dy)
    if r <= cfg.motion_epsilon:
        return None
    base = math.atan2(dy, dx)
    angles = base + np.arange(cfg.m_circle) * (2.0 * PI / cfg.m_circle)
    return np.stack([l_prev[0] + r * np.cos(angles),
                     l_prev[1] + r * np.sin(angles)], axis=1)


def validate_motion(d: np.ndarray, D: np.ndarray) -> np.ndarray:
    """v = (max D - d) / (max D - min D) per goal column, clamped to [0, 1].
    A degenerate column (every counterfactual at the same distance) carries
    no information and scores 0.5."""
    if D.ndim != 2 or D.shape[0] < 2:
        raise ValueError("need at least two counterfactual rows")
    mx = D.max(axis=0)
    mn = D.min(axis=0)
    span = mx - mn
    with np.errstate(invalid="ignore", divide="ignore"):
        v = (mx - d) / span
    v = np.where(span == 0.0, 0.5, v)
    return np.clip(v, 0.0, 1.0)


class LowPass:
    """Discrete first-order low-pass filter over validation vectors."""

    def __init__(self, coeff: float):
        if not (0.0 < coeff <= 1.0):
            raise ValueError("coefficient must be in (0, 1]")
        self.coeff = coeff
        self.state: np.ndarray | None = None

    def update(self, v: np.ndarray) -> np.ndarray:
        if self.state is None or len(self.state) != len(v):
            self.state = np.asarray(v, dtype=float).copy()
        else:
            self.state = self.coeff * v + (1.0 - self.coeff) * self.state
        return self.state.copy()

    def extend(self, value: float = 0.0) -> None:
        """Append a component for a goal added mid-run."""
        if self.state is not None:
            self.state = np.append(self.state, value)

    def drop(self, index: int) -> None:
        if self.state is not None:
            self.state = np.delete(self.state, index)


def update_trigger(prev: WorkerPose, pose: WorkerPose, cfg: ValidationConfig) -> bool:
    """True when the pose crossed a trigger-grid cell or turned more than
    the orientation threshold since the last estimation update."""
    cell_prev = (math.floor(prev.x / cfg.trigger_cell), math.floor(prev.y / cfg.trigger_cell))
    cell_now = (math.floor(pose.x / cfg.trigger_cell), math.floor(pose.y / cfg.trigger_cell))
    if cell_prev != cell_now:
        return True
    return abs(wrap_angle(pose.theta - prev.theta)) > cfg.trigger_angle
