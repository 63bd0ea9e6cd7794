"""Shortest-path distances from every graph node to every goal, maintained
incrementally under robot-induced edge cuts, plus grid line-of-sight tests.

One incremental goal-rooted search is kept per goal (D*-Lite with a zero
heuristic, i.e. incremental Dijkstra): cutting or restoring an edge repairs
only the affected region. Unreachable distances are capped at ten map
diagonals instead of infinity so downstream validation arithmetic stays
finite; capped goals always validate near zero.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .floorplan import OccupancyGrid
from .voronoi import VoronoiGraph

INF = float("inf")

UNREACHABLE_CAP_FACTOR = 10.0


class PlannerError(ValueError):
    pass


@dataclass(frozen=True)
class RobotDisk:
    """A mobile robot treated as a moving obstacle."""
    id: str
    x: float
    y: float
    radius: float = 1.0


@dataclass
class EdgeCutSet:
    """Edges removed from the graph, with the robots responsible."""
    pins: dict[int, frozenset[str]] = field(default_factory=dict)

    def edge_ids(self) -> set[int]:
        return set(self.pins)

    def __len__(self) -> int:
        return len(self.pins)


class _GoalSearch:
    """Incremental single-goal shortest-path search over the shared cut state."""

    def __init__(self, planner: "GoalDistancePlanner", goal: int):
        self.planner = planner
        self.goal = goal
        self.g: dict[int, float] = {}
        self.rhs: dict[int, float] = {}
        self.heap: list[tuple[float, float, int]] = []
        for nid in planner.graph.nodes:
            self.g[nid] = INF
            self.rhs[nid] = INF
        self.rhs[goal] = 0.0
        self._push(goal)
        self.compute()

    def _key(self, u: int) -> tuple[float, float, int]:
        k = min(self.g[u], self.rhs[u])
        return (k, k, u)

    def _push(self, u: int) -> None:
        heapq.heappush(self.heap, self._key(u))

    def add_node(self, u: int) -> None:
        self.g.setdefault(u, INF)
        self.rhs.setdefault(u, INF)

    def update_vertex(self, u: int) -> None:
        if u != self.goal:
            best = INF
            for v, eid in self.planner.neighbors(u):
                w = self.planner.edge_weight(eid)
                cand = w + self.g[v]
                if cand < best:
                    best = cand
            self.rhs[u] = best
        if self.g[u] != self.rhs[u]:
            self._push(u)

    def compute(self) -> None:
        while self.heap:
            k1, _, u = heapq.heappop(self.heap)
            if u not in self.g:
                continue  # node dropped from a stale entry
            if (k1, k1, u) != self._key(u):
                if self.g[u] != self.rhs[u]:
                    self._push(u)
                continue
            if self.g[u] > self.rhs[u]:
                self.g[u] = self.rhs[u]
                for v, _ in self.planner.neighbors(u):
                    self.update_vertex(v)
            elif self.g[u] < self.rhs[u]:
                self.g[u] = INF
                self.update_vertex(u)
                for v, _ in self.planner.neighbors(u):
                    self.update_vertex(v)


class GoalDistancePlanner:
    """Owns the graph's dynamic state: edge cuts and per-goal distances."""

    def __init__(self, graph: VoronoiGraph, unreachable_cap: float | None = None):
        if not graph.goal_ids:
            raise PlannerError("graph has no goals")
        self.graph = graph
        if unreachable_cap is None:
            h, w = graph.skeleton.mask.shape
            unreachable_cap = UNREACHABLE_CAP_FACTOR * math.hypot(
                w * graph.cell_size, h * graph.cell_size)
        self.unreachable_cap = float(unreachable_cap)
        self.cut_pins: dict[int, set[str]] = {}
        self._adj: dict[int, list[tuple[int, int]]] = {}
        self._bbox_cache = None
        self._rebuild_adjacency()
        self.searches: dict[int, _GoalSearch] = {}
        for goal in graph.goal_ids:
            self.searches[goal] = _GoalSearch(self, goal)
        # Cached F matrix in graph.order(); refreshed in place so tests can
        # count which entries an incremental update actually touched.
        self._order = graph.order()
        self._index = {nid: i for i, nid in enumerate(self._order)}
        self._F = np.empty((len(self._order), len(graph.goal_ids)))
        self._refresh_all()
        self.last_changed_entries: list[tuple[int, int]] = []

    # -- graph access shared by all searches --------------------------------

    def _rebuild_adjacency(self) -> None:
        self._adj = {
            nid: [(self.graph.edges[eid].other(nid), eid)
                  for eid in self.graph.adjacency[nid]]
            for nid in self.graph.nodes
        }

    def neighbors(self, u: int) -> list[tuple[int, int]]:
        return self._adj[u]

    def edge_weight(self, eid: int) -> float:
        if eid in self.cut_pins:
            return INF
        return self.graph.edges[eid].length

    # -- F matrix ------------------------------------------------------------

    def _refresh_all(self) -> None:
        for j, goal in enumerate(self.graph.goal_ids):
            search = self.searches[goal]
            for nid, i in self._index.items():
                self._F[i, j] = min(search.g[nid], self.unreachable_cap)

    def _refresh_changed(self) -> list[tuple[int, int]]:
        changed = []
        for j, goal in enumerate(self.graph.goal_ids):
            search = self.searches[goal]
            for nid, i in self._index.items():
                val = min(search.g[nid], self.unreachable_cap)
                if val != self._F[i, j]:
                    self._F[i, j] = val
                    changed.append((i, j))
        return changed

    def distance_matrix(self) -> np.ndarray:
        """n x g matrix of metres in graph order; read-only view."""
        F = self._F.view()
        F.flags.writeable = False
        return F

    def order(self) -> list[int]:
        return list(self._order)

    def is_unreachable(self, value: float) -> bool:
        return value >= self.unreachable_cap

    # -- cuts ----------------------------------------------------------------

    def _edges_hit_by(self, robot: RobotDisk) -> list[int]:
        """Edges whose cell path comes within radius + cell/2 of the robot."""
        thr = robot.radius + self.graph.cell_size / 2.0
        ids, lo, hi = self._edge_bboxes()
        near = np.nonzero(
            (robot.x >= lo[:, 0] - thr) & (robot.x <= hi[:, 0] + thr)
            & (robot.y >= lo[:, 1] - thr) & (robot.y <= hi[:, 1] + thr)
        )[0]
        hits = []
        for k in near:
            centers = self._edge_centers(int(ids[k]))
            d2 = (centers[:, 0] - robot.x) ** 2 + (centers[:, 1] - robot.y) ** 2
            if d2.min() <= thr * thr:
                hits.append(int(ids[k]))
        return hits

    def _edge_bboxes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._bbox_cache is None or self._bbox_cache[3] != len(self.graph.edges):
            ids = np.array(sorted(self.graph.edges), dtype=np.int64)
            lo = np.empty((len(ids), 2))
            hi = np.empty((len(ids), 2))
            for k, eid in enumerate(ids):
                centers = self._edge_centers(int(eid))
                lo[k] = centers.min(axis=0)
                hi[k] = centers.max(axis=0)
            self._bbox_cache = (ids, lo, hi, len(ids))
        return self._bbox_cache[0], self._bbox_cache[1], self._bbox_cache[2]

    def _edge_centers(self, eid: int) -> np.ndarray:
        e = self.graph.edges[eid]
        if getattr(e, "_centers", None) is None:
            ox, oy = self.graph.origin
            cs = self.graph.cell_size
            e._centers = np.stack([
                ox + (e.cells[:, 0] + 0.5) * cs,
                oy + (e.cells[:, 1] + 0.5) * cs,
            ], axis=1)
        return e._centers

    def _apply_weight_changes(self, edges: set[int]) -> list[str]:
        for search in self.searches.values():
            for eid in edges:
                e = self.graph.edges[eid]
                search.update_vertex(e.a)
                if e.b != e.a:
                    search.update_vertex(e.b)
            search.compute()
        self.last_changed_entries = self._refresh_changed()
        warnings = []
        for j, goal in enumerate(self.graph.goal_ids):
            incident = self.graph.adjacency[goal]
            if incident and all(eid in self.cut_pins for eid in incident):
                name = self.graph.nodes[goal].name or str(goal)
                warnings.append(f"goal {name} enclosed by robots; distances capped")
        return warnings

    def apply_robot_obstacles(self, robots: list[RobotDisk]) -> tuple[EdgeCutSet, list[str]]:
        """Cut every edge intersected by a robot disk. Returns the delta cut
        set (for release) and any warnings raised."""
        for r in robots:
            if r.radius <= 0:
                raise PlannerError(f"robot {r.id!r} has non-positive radius")
        delta: dict[int, set[str]] = {}
        newly_cut: set[int] = set()
        for robot in robots:
            for eid in self._edges_hit_by(robot):
                pins = self.cut_pins.get(eid)
                if pins is None:
                    pins = set()
                    self.cut_pins[eid] = pins
                    newly_cut.add(eid)
                if robot.id not in pins:
                    pins.add(robot.id)
                    delta.setdefault(eid, set()).add(robot.id)
        warnings = self._apply_weight_changes(newly_cut) if newly_cut else []
        if not newly_cut:
            self.last_changed_entries = []
        return EdgeCutSet({eid: frozenset(ids) for eid, ids in delta.items()}), warnings

    def release_robot_obstacles(self, cuts: EdgeCutSet) -> None:
        """Undo a previously returned cut delta; restoring every cut restores
        the original distance field exactly."""
        restored: set[int] = set()
        for eid, robot_ids in cuts.pins.items():
            if eid not in self.graph.edges:
                raise PlannerError(f"unknown edge id {eid}")
            pins = self.cut_pins.get(eid)
            if pins is None:
                continue
            pins -= set(robot_ids)
            if not pins:
                del self.cut_pins[eid]
                restored.add(eid)
        if restored:
            self._apply_weight_changes(restored)
        else:
            self.last_changed_entries = []

    def sync_robot_obstacles(self, robots: list[RobotDisk]) -> tuple[set[int], list[str]]:
        """Tick-loop convenience: make the cut state match exactly the given
        robot placement in one incremental repair. Returns (cut edge ids,
        warnings)."""
        desired: dict[int, set[str]] = {}
        for robot in robots:
            for eid in self._edges_hit_by(robot):
                desired.setdefault(eid, set()).add(robot.id)
        changed = {eid for eid in set(desired) ^ set(self.cut_pins)}
        self.cut_pins = desired
        warnings = self._apply_weight_changes(changed) if changed else []
        if not changed:
            self.last_changed_entries = []
        return set(desired), warnings

    # -- goal management -----------------------------------------------------

    def add_goal(self, node_id: int) -> None:
        if node_id not in self.graph.nodes:
            raise PlannerError(f"unknown node {node_id}")
        self.graph.mark_goal(node_id)
        self.searches[node_id] = _GoalSearch(self, node_id)
        self._reindex()

    def remove_goal(self, node_id: int) -> None:
        if node_id not in self.searches:
            raise PlannerError(f"node {node_id} is not a goal")
        self.graph.unmark_goal(node_id)
        del self.searches[node_id]
        self._reindex()

    def node_structure_changed(self) -> None:
        """Re-sync after graph mutation (e.g. insert_node splitting an edge)."""
        self._rebuild_adjacency()
        self._bbox_cache = None
        self.cut_pins = {eid: pins for eid, pins in self.cut_pins.items()
                         if eid in self.graph.edges}
        for search in self.searches.values():
            for nid in self.graph.nodes:
                search.add_node(nid)
            for nid in list(self.graph.nodes):
                search.update_vertex(nid)
            search.compute()
        self._reindex()

    def _reindex(self) -> None:
        self._order = self.graph.order()
        self._index = {nid: i for i, nid in enumerate(self._order)}
        self._F = np.empty((len(self._order), len(self.graph.goal_ids)))
        self._refresh_all()


def compute_goal_distances(graph: VoronoiGraph) -> np.ndarray:
    """One-shot exact goal distances (n x g, graph order, capped)."""
    return GoalDistancePlanner(graph).distance_matrix().copy()


def dijkstra(adjacency, source, weight) -> dict:
    """Plain Dijkstra over an adjacency mapping node -> [(neighbor, edge_id)].
    `weight(edge_id)` may return inf for cut edges."""
    dist = {source: 0.0}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, eid in adjacency[u]:
            w = weight(eid)
            if w == INF:
                continue
            nd = d + w
            if nd < dist.get(v, INF):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def shortest_route(planner: GoalDistancePlanner, start: int, end: int) -> tuple[list[int], float]:
    """Optimal node path over currently uncut edges (used by the scripted
    worker, never by the estimator)."""
    graph = planner.graph
    if start not in graph.nodes or end not in graph.nodes:
        raise PlannerError("unknown route endpoint")
    if start == end:
        return [start], 0.0
    dist = {start: 0.0}
    parent: dict[int, int] = {}
    heap = [(0.0, start)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == end:
            break
        done.add(u)
        for v, eid in planner.neighbors(u):
            w = planner.edge_weight(eid)
            if w == INF:
                continue
            nd = d + w
            if nd < dist.get(v, INF):
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    if end not in dist:
        raise PlannerError(f"node {end} unreachable from {start}")
    path = [end]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return path, dist[end]


# -- line of sight -----------------------------------------------------------

class Raycaster:
    """Batched visibility tests against one grid.

    Rays are first screened by sampling at half-cell steps: a sample inside
    an occupied cell proves blockage, while sampled clearance (from the
    exact distance field) staying above a covering margin proves the whole
    segment clear. Only rays between the two proofs pay for the exact
    supercover traversal, which the screens bound tightly on real maps.
    """

    def __init__(self, grid: OccupancyGrid, clearance: np.ndarray | None = None):
        self.grid = grid
        self.occ = grid.occupied
        self.cs = grid.cell_size
        self.ox, self.oy = grid.origin
        self.clearance = clearance
        # Sound margin: sample spacing/2 for the segment wandering between
        # samples plus one cell diagonal for both cell-center quantisations.
        self.margin = self.cs * (math.sqrt(2.0) + 0.25)

    def screen(self, origins: np.ndarray, targets: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray]:
        """Per ray: (surely_blocked, surely_clear). Rays flagged neither way
        need `clear_exact`."""
        cs = self.cs
        dx = targets[:, 0] - origins[:, 0]
        dy = targets[:, 1] - origins[:, 1]
        max_len = float(np.hypot(dx, dy).max(initial=0.0))
        n = int(max_len / (cs * 0.5)) + 2
        ts = np.linspace(0.0, 1.0, n)
        px = np.floor((origins[:, 0, None] + ts[None, :] * dx[:, None] - self.ox) / cs)
        py = np.floor((origins[:, 1, None] + ts[None, :] * dy[:, None] - self.oy) / cs)
        px = px.astype(np.int64)
        py = py.astype(np.int64)
        px.clip(0, self.grid.width - 1, out=px)
        py.clip(0, self.grid.height - 1, out=py)
        blocked = self.occ[py, px].any(axis=1)
        if self.clearance is None or blocked.all():
            return blocked, np.zeros(len(origins), dtype=bool)
        clear = self.clearance[py, px].min(axis=1) > self.margin
        return blocked, clear & ~blocked

    def screen_blocked(self, a: tuple[float, float], targets: np.ndarray) -> np.ndarray:
        origins = np.broadcast_to(np.asarray(a, dtype=float), (len(targets), 2))
        return self.screen(origins, targets)[0]

    def clear_exact(self, a: tuple[float, float], b: tuple[float, float]) -> bool:
        px, py = _supercover_cells(self.grid, a[0], a[1], b[0], b[1])
        return not self.occ[py, px].any()

    @staticmethod
    def robots_blocked_pairs(origins: np.ndarray, targets: np.ndarray,
                             robot_arr: np.ndarray) -> np.ndarray:
        """(k,) bool; True where any robot disk intersects segment i.
        `robot_arr` is (m, 3) of x, y, radius."""
        abx = (targets[:, 0] - origins[:, 0])[:, None]
        aby = (targets[:, 1] - origins[:, 1])[:, None]
        L2 = abx * abx + aby * aby
        L2safe = np.where(L2 == 0.0, 1.0, L2)
        rx = robot_arr[None, :, 0] - origins[:, 0, None]
        ry = robot_arr[None, :, 1] - origins[:, 1, None]
        t = (rx * abx + ry * aby) / L2safe
        t = t.clip(0.0, 1.0)
        d2 = (t * abx - rx) ** 2 + (t * aby - ry) ** 2
        return (d2 < robot_arr[None, :, 2] ** 2).any(axis=1)

    @staticmethod
    def robots_blocked(a: tuple[float, float], targets: np.ndarray,
                       robots: list[RobotDisk]) -> np.ndarray:
        if not robots:
            return np.zeros(len(targets), dtype=bool)
        arr = np.array([[r.x, r.y, r.radius] for r in robots])
        origins = np.broadcast_to(np.asarray(a, dtype=float), (len(targets), 2))
        return Raycaster.robots_blocked_pairs(origins, targets, arr)


def _supercover_cells(grid: OccupancyGrid, ax: float, ay: float,
                      bx: float, by: float) -> tuple[np.ndarray, np.ndarray]:
    """All half-open grid cells the closed segment a-b passes through.

    Breakpoints are the parameters where the segment crosses cell
    boundaries; the cell of each interval midpoint is exactly the cell the
    open interval lies in, so corner contacts resolve by the same half-open
    rule as point-in-cell tests."""
    cs = grid.cell_size
    x0 = (ax - grid.origin[0]) / cs
    y0 = (ay - grid.origin[1]) / cs
    x1 = (bx - grid.origin[0]) / cs
    y1 = (by - grid.origin[1]) / cs
    dx, dy = x1 - x0, y1 - y0
    fx0, fx1 = math.floor(min(x0, x1)), math.floor(max(x0, x1))
    fy0, fy1 = math.floor(min(y0, y1)), math.floor(max(y0, y1))
    nx = fx1 - fx0 if dx != 0.0 else 0
    ny = fy1 - fy0 if dy != 0.0 else 0
    t = np.empty(nx + ny + 2)
    t[0], t[1] = 0.0, 1.0
    if nx:
        t[2:2 + nx] = (np.arange(fx0 + 1, fx1 + 1) - x0) / dx
    if ny:
        t[2 + nx:] = (np.arange(fy0 + 1, fy1 + 1) - y0) / dy
    t.sort()
    mid = (t[:-1] + t[1:]) * 0.5
    px = np.floor(x0 + mid * dx).astype(np.int64)
    py = np.floor(y0 + mid * dy).astype(np.int64)
    if fx0 < 0 or fx1 >= grid.width or fy0 < 0 or fy1 >= grid.height:
        px.clip(0, grid.width - 1, out=px)
        py.clip(0, grid.height - 1, out=py)
    return px, py


def _segment_blocked_by_robots(a, b, robots) -> bool:
    abx, aby = b[0] - a[0], b[1] - a[1]
    L2 = abx * abx + aby * aby
    for r in robots:
        if L2 == 0.0:
            d2 = (r.x - a[0]) ** 2 + (r.y - a[1]) ** 2
        else:
            t = max(0.0, min(1.0, ((r.x - a[0]) * abx + (r.y - a[1]) * aby) / L2))
            d2 = (a[0] + t * abx - r.x) ** 2 + (a[1] + t * aby - r.y) ** 2
        if d2 < r.radius * r.radius:
            return True
    return False


def line_of_sight(grid: OccupancyGrid, a: tuple[float, float], b: tuple[float, float],
                  robots: list[RobotDisk] = ()) -> bool:
    """True iff the straight segment a-b crosses no occupied cell and no
    robot disk."""
    if robots and _segment_blocked_by_robots(a, b, robots):
        return False
    # Cheap sound rejection: a sample landing inside an occupied cell proves
    # blockage; only then pay for the exact supercover traversal.
    cs = grid.cell_size
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    n = int(length / (cs * 0.5)) + 2
    ts = np.linspace(0.0, 1.0, n)
    sx = np.floor((a[0] + ts * (b[0] - a[0]) - grid.origin[0]) / cs).astype(np.int64)
    sy = np.floor((a[1] + ts * (b[1] - a[1]) - grid.origin[1]) / cs).astype(np.int64)
    np.clip(sx, 0, grid.width - 1, out=sx)
    np.clip(sy, 0, grid.height - 1, out=sy)
    if grid.occupied[sy, sx].any():
        return False
    px, py = _supercover_cells(grid, a[0], a[1], b[0], b[1])
    return not grid.occupied[py, px].any()
