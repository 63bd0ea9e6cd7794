"""Skeleton extraction from the obstacle distance field and reduction to a
node graph (junctions + goals, dead ends discarded).

The skeleton is the set of free cells on the ridge of the distance field:
cells whose two nearest obstacles are (discretely) equidistant. Junction
cells (skeleton degree >= 3) and snapped goal cells become graph nodes;
skeleton chains between them become edges with metric lengths. Dead-end
chains that do not lead to a goal are discarded. Goal nodes always occupy
the last g positions of the node ordering, so selecting goal columns of a
distance matrix is a pure suffix selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import medial_axis

from .floorplan import DistanceField, LayoutDocument

_EIGHT = np.ones((3, 3), dtype=int)
_SQRT2 = math.sqrt(2.0)

DEFAULT_MIN_CLEARANCE = 0.25
DEFAULT_SNAP_RADIUS = 1.0


class SkeletonError(ValueError):
    """Raised when no usable skeleton can be extracted."""


class GraphError(ValueError):
    """Raised for invalid graph construction or mutation requests."""


@dataclass
class Skeleton:
    """Thin ridge of the distance field; adjacency is 8-connectivity."""

    mask: np.ndarray            # bool, [iy, ix]
    clearance: np.ndarray       # metres, same shape
    cell_size: float
    origin: tuple[float, float]

    def cells(self) -> np.ndarray:
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs, ys], axis=1)

    def center_of(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.cell_size,
            self.origin[1] + (iy + 0.5) * self.cell_size,
        )


def _degree_map(mask: np.ndarray) -> np.ndarray:
    neigh = ndimage.convolve(mask.astype(np.uint8), _EIGHT, mode="constant", cval=0)
    return np.where(mask, neigh - 1, 0)


def _is_simple(mask: np.ndarray, iy: int, ix: int) -> bool:
    """True if removing (iy, ix) keeps its 8-neighbourhood connected."""
    patch = mask[iy - 1:iy + 2, ix - 1:ix + 2].copy()
    patch[1, 1] = False
    if not patch.any():
        return False
    _, n = ndimage.label(patch, structure=_EIGHT)
    return n == 1


def _reduce_blocks(mask: np.ndarray) -> None:
    """Remove simple cells from 2x2 solid blocks until no reducible block
    remains. Irreducible crossings (rare) are left intact."""
    while True:
        blocks = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
        ys, xs = np.nonzero(blocks)
        if len(ys) == 0:
            return
        removed = False
        for iy, ix in zip(ys, xs):
            for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
                cy, cx = iy + dy, ix + dx
                if mask[cy, cx] and _is_simple(mask, cy, cx):
                    mask[cy, cx] = False
                    removed = True
                    break
        if not removed:
            return


def build_skeleton(dfield: DistanceField, min_clearance: float = DEFAULT_MIN_CLEARANCE) -> Skeleton:
    """Extract the distance-field ridge as a thin connected skeleton.

    Cells with clearance below `min_clearance` are excluded, which
    suppresses whiskers into gaps too narrow for a worker.
    """
    if min_clearance < 0:
        raise ValueError("min_clearance must be >= 0")
    free = dfield.meters > 0
    if not free.any():
        raise SkeletonError("map has no free space, skeleton is empty")
    # medial_axis breaks ties among equal-distance pixels with an RNG; pin
    # it so identical maps always yield identical skeletons.
    mask = medial_axis(free, rng=0)
    if min_clearance > 0:
        mask &= dfield.meters >= min_clearance
    _reduce_blocks(mask)
    if not mask.any():
        raise SkeletonError(
            f"skeleton empty after clearance filter ({min_clearance} m); "
            f"map may be too tight"
        )
    return Skeleton(mask=mask, clearance=dfield.meters, cell_size=dfield.cell_size,
                    origin=dfield.origin)


@dataclass
class GraphNode:
    id: int
    cell: tuple[int, int]       # (ix, iy)
    pos: tuple[float, float]    # world metres (cell center)
    kind: str                   # junction | goal | inserted
    name: str | None = None


@dataclass
class GraphEdge:
    id: int
    a: int
    b: int
    cells: np.ndarray           # (k, 2) int array of (ix, iy), a-first
    length: float
    cum: np.ndarray = field(repr=False, default=None)  # cumulative metres per cell

    def other(self, node_id: int) -> int:
        return self.b if node_id == self.a else self.a


def _path_cum(cells: np.ndarray, cell_size: float) -> np.ndarray:
    if len(cells) < 2:
        return np.zeros(len(cells))
    steps = np.abs(np.diff(cells, axis=0)).max(axis=1)  # 1 = straight or diagonal
    diag = (np.abs(np.diff(cells, axis=0)).min(axis=1) == 1)
    lengths = np.where(diag, _SQRT2, 1.0) * cell_size
    return np.concatenate([[0.0], np.cumsum(lengths)])


class VoronoiGraph:
    """Node graph over the skeleton. Node ids are stable; the node ordering
    places goals in the last g slots (declared order)."""

    def __init__(self, skeleton: Skeleton):
        self.skeleton = skeleton
        self.cell_size = skeleton.cell_size
        self.origin = skeleton.origin
        self.nodes: dict[int, GraphNode] = {}
        self.edges: dict[int, GraphEdge] = {}
        self.adjacency: dict[int, list[int]] = {}
        self.goal_ids: list[int] = []
        self._cell_to_node: dict[tuple[int, int], int] = {}
        self._cell_to_edge: dict[tuple[int, int], tuple[int, int]] = {}
        self._next_node = 0
        self._next_edge = 0
        self._mapped_cache = None

    # -- construction ------------------------------------------------------

    def _add_node(self, cell: tuple[int, int], kind: str, name: str | None = None) -> int:
        nid = self._next_node
        self._next_node += 1
        pos = self.skeleton.center_of(cell[0], cell[1])
        self.nodes[nid] = GraphNode(id=nid, cell=cell, pos=pos, kind=kind, name=name)
        self.adjacency[nid] = []
        self._cell_to_node[cell] = nid
        self._mapped_cache = None
        return nid

    def _add_edge(self, a: int, b: int, cells: np.ndarray) -> int:
        eid = self._next_edge
        self._next_edge += 1
        cum = _path_cum(cells, self.cell_size)
        edge = GraphEdge(id=eid, a=a, b=b, cells=cells, length=float(cum[-1]), cum=cum)
        if edge.length <= 0:
            raise GraphError("degenerate zero-length edge")
        self.edges[eid] = edge
        self.adjacency[a].append(eid)
        if b != a:
            self.adjacency[b].append(eid)
        for i, (cx, cy) in enumerate(map(tuple, cells)):
            if (cx, cy) not in self._cell_to_node:
                self._cell_to_edge[(cx, cy)] = (eid, i)
        self._mapped_cache = None
        return eid

    def _remove_edge(self, eid: int) -> None:
        edge = self.edges.pop(eid)
        self.adjacency[edge.a] = [e for e in self.adjacency[edge.a] if e != eid]
        if edge.b != edge.a:
            self.adjacency[edge.b] = [e for e in self.adjacency[edge.b] if e != eid]
        for cx, cy in map(tuple, edge.cells):
            if self._cell_to_edge.get((cx, cy), (None,))[0] == eid:
                del self._cell_to_edge[(cx, cy)]
        self._mapped_cache = None

    # -- ordering ----------------------------------------------------------

    def order(self) -> list[int]:
        """Node ids with goals occupying the last g positions."""
        goal_set = set(self.goal_ids)
        rest = sorted(nid for nid in self.nodes if nid not in goal_set)
        return rest + list(self.goal_ids)

    def positions(self, order: list[int] | None = None) -> np.ndarray:
        order = self.order() if order is None else order
        return np.array([self.nodes[nid].pos for nid in order])

    @property
    def goal_count(self) -> int:
        return len(self.goal_ids)

    def mark_goal(self, node_id: int) -> None:
        if node_id in self.goal_ids:
            raise GraphError(f"node {node_id} is already a goal")
        self.goal_ids.append(node_id)

    def unmark_goal(self, node_id: int) -> None:
        self.goal_ids.remove(node_id)

    # -- queries -----------------------------------------------------------

    def _mapped_arrays(self):
        if self._mapped_cache is None:
            candidates = list(self._cell_to_node.keys()) + list(self._cell_to_edge.keys())
            arr = np.array(candidates) if candidates else np.zeros((0, 2), dtype=int)
            centers = np.stack([
                self.origin[0] + (arr[:, 0] + 0.5) * self.cell_size,
                self.origin[1] + (arr[:, 1] + 0.5) * self.cell_size,
            ], axis=1) if len(arr) else np.zeros((0, 2))
            flat = (arr[:, 1].astype(np.int64) * self.skeleton.mask.shape[1] + arr[:, 0]
                    if len(arr) else np.zeros(0, dtype=np.int64))
            self._mapped_cache = (arr, centers, flat)
        return self._mapped_cache

    def nearest_mapped_cell(self, x: float, y: float, radius: float) -> tuple[int, int] | None:
        """Nearest skeleton cell that belongs to a node or an edge path,
        within `radius` metres. Deterministic: ties break on flat index."""
        arr, centers, flat = self._mapped_arrays()
        if len(arr) == 0:
            return None
        d2 = (centers[:, 0] - x) ** 2 + (centers[:, 1] - y) ** 2
        best = np.lexsort((flat, d2))[0]
        if d2[best] > radius * radius:
            return None
        return int(arr[best, 0]), int(arr[best, 1])

    def nearest_node(self, x: float, y: float) -> int:
        """Graph-snapped nearest node: snap to the skeleton, then take the
        closer endpoint of the containing edge."""
        cell = self.nearest_mapped_cell(x, y, radius=float("inf"))
        if cell is None:
            raise GraphError("graph has no cells")
        if cell in self._cell_to_node:
            return self._cell_to_node[cell]
        eid, idx = self._cell_to_edge[cell]
        edge = self.edges[eid]
        along_a = edge.cum[idx]
        along_b = edge.cum[-1] - edge.cum[idx]
        return edge.a if along_a <= along_b else edge.b

    # -- mutation ----------------------------------------------------------

    def insert_node(self, x: float, y: float, snap_radius: float = DEFAULT_SNAP_RADIUS,
                    kind: str = "inserted", name: str | None = None) -> int:
        """Insert a node at an arbitrary location by splitting the containing
        edge. Returns the existing node id when the position snaps onto one."""
        cell = self.nearest_mapped_cell(x, y, snap_radius)
        if cell is None:
            raise GraphError(
                f"position ({x:.3f}, {y:.3f}) is not within {snap_radius} m of the skeleton"
            )
        if cell in self._cell_to_node:
            return self._cell_to_node[cell]
        eid, idx = self._cell_to_edge[cell]
        edge = self.edges[eid]
        nid = self._add_node(cell, kind=kind, name=name)
        cells_a = edge.cells[:idx + 1]
        cells_b = edge.cells[idx:]
        a, b = edge.a, edge.b
        self._remove_edge(eid)
        self._add_edge(a, nid, cells_a)
        self._add_edge(nid, b, cells_b)
        return nid

    # -- export ------------------------------------------------------------

    def to_json(self) -> dict:
        order = self.order()
        return {
            "cell_size_m": self.cell_size,
            "nodes": [
                {
                    "id": nid,
                    "name": self.nodes[nid].name,
                    "kind": self.nodes[nid].kind,
                    "x": self.nodes[nid].pos[0],
                    "y": self.nodes[nid].pos[1],
                }
                for nid in order
            ],
            "edges": [
                {
                    "id": e.id,
                    "a": e.a,
                    "b": e.b,
                    "length_m": e.length,
                    "path": [[int(c[0]), int(c[1])] for c in e.cells],
                }
                for e in sorted(self.edges.values(), key=lambda e: e.id)
            ],
            "goals": list(self.goal_ids),
        }

    def to_dot(self) -> str:
        lines = ["graph voronoi {"]
        for nid in self.order():
            n = self.nodes[nid]
            label = n.name or f"{n.kind[0].upper()}{nid}"
            shape = "box" if nid in self.goal_ids else "circle"
            lines.append(f'  n{nid} [label="{label}", shape={shape}];')
        for e in sorted(self.edges.values(), key=lambda e: e.id):
            lines.append(f'  n{e.a} -- n{e.b} [label="{e.length:.2f}"];')
        lines.append("}")
        return "\n".join(lines)


def _goal_snap_cells(skeleton: Skeleton, layout: LayoutDocument, goals: list[str],
                     snap_radius: float, claimed: set[tuple[int, int]]) -> dict[str, tuple[int, int]]:
    ys, xs = np.nonzero(skeleton.mask)
    centers_x = skeleton.origin[0] + (xs + 0.5) * skeleton.cell_size
    centers_y = skeleton.origin[1] + (ys + 0.5) * skeleton.cell_size
    flat = ys.astype(np.int64) * skeleton.mask.shape[1] + xs
    result: dict[str, tuple[int, int]] = {}
    for goal in goals:
        gx, gy = layout.node_position(goal)
        d2 = (centers_x - gx) ** 2 + (centers_y - gy) ** 2
        for i in np.lexsort((flat, d2)):
            if d2[i] > snap_radius * snap_radius:
                raise GraphError(
                    f"goal {goal!r} is {math.sqrt(float(d2[i])):.2f} m from the nearest "
                    f"free skeleton cell, beyond the {snap_radius} m snap radius"
                )
            cell = (int(xs[i]), int(ys[i]))
            if cell not in claimed:
                claimed.add(cell)
                result[goal] = cell
                break
        else:
            raise GraphError(f"no skeleton cell available for goal {goal!r}")
    return result


def extract_graph(skeleton: Skeleton, layout: LayoutDocument,
                  goals: list[str] | None = None,
                  snap_radius: float = DEFAULT_SNAP_RADIUS) -> VoronoiGraph:
    """Reduce the skeleton to a graph of junction and goal nodes.

    Junctions are detected on the unpruned skeleton (skeleton degree >= 3,
    8-connected clusters collapsed to their highest-clearance cell). Each
    goal snaps to its nearest skeleton cell. Chains are then traced between
    node cells; chains that end blind (dead ends without a goal) are
    discarded.
    """
    goal_names = list(layout.goals) if goals is None else list(goals)
    if not goal_names:
        raise GraphError("layout declares no goals; at least one is required")
    for g in goal_names:
        if g not in layout.nodes:
            raise GraphError(f"goal {g!r} is not a declared layout node")

    mask = skeleton.mask
    h, w = mask.shape
    degree = _degree_map(mask)
    graph = VoronoiGraph(skeleton)

    # Junction clusters -> representative cells.
    junction_mask = mask & (degree >= 3)
    labels, n_clusters = ndimage.label(junction_mask, structure=_EIGHT)
    cluster_cells: dict[int, int] = {}   # label -> node id
    reps = []
    for lbl in range(1, n_clusters + 1):
        ys, xs = np.nonzero(labels == lbl)
        clear = skeleton.clearance[ys, xs]
        flat = ys.astype(np.int64) * w + xs
        best = np.lexsort((flat, -clear))[0]
        reps.append((lbl, int(xs[best]), int(ys[best])))
    reps.sort(key=lambda r: r[2] * w + r[1])  # scan order for stable numbering
    for lbl, ix, iy in reps:
        cluster_cells[lbl] = graph._add_node((ix, iy), kind="junction")

    # Junction cells all resolve to their cluster's node.
    ys, xs = np.nonzero(junction_mask)
    for x, y in zip(xs, ys):
        graph._cell_to_node[(int(x), int(y))] = cluster_cells[labels[y, x]]

    # Goals snap to (unclaimed) skeleton cells and become nodes of their own.
    claimed = set(graph._cell_to_node.keys())
    snaps = _goal_snap_cells(skeleton, layout, goal_names, snap_radius, claimed)
    for goal in goal_names:
        nid = graph._add_node(snaps[goal], kind="goal", name=goal)
        graph.goal_ids.append(nid)

    node_cells = dict(graph._cell_to_node)

    # Trace chains between node cells; blind chains are dead ends and die.
    consumed = np.zeros_like(mask)
    direct: set[frozenset] = set()
    offsets = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]

    def neighbors(ix, iy):
        for dx, dy in offsets:
            nx, ny = ix + dx, iy + dy
            if 0 <= nx < w and 0 <= ny < h and mask[ny, nx]:
                yield nx, ny

    start_cells = sorted(node_cells.keys(), key=lambda c: c[1] * w + c[0])
    for sc in start_cells:
        for first in sorted(neighbors(*sc), key=lambda c: c[1] * w + c[0]):
            if first in node_cells:
                pair = frozenset((sc, first))
                if node_cells[first] != node_cells[sc] and pair not in direct:
                    direct.add(pair)
                    graph._add_edge(node_cells[sc], node_cells[first],
                                    np.array([sc, first]))
                continue
            if consumed[first[1], first[0]]:
                continue
            path = [sc, first]
            consumed[first[1], first[0]] = True
            prev, cur = sc, first
            terminal = None
            while True:
                cand = [c for c in neighbors(*cur) if c != prev]
                # A brush against another cell of the start cluster right at
                # the chain mouth is not a terminal, keep walking.
                node_next = sorted(
                    (c for c in cand if c in node_cells
                     and not (node_cells[c] == node_cells[sc] and len(path) <= 3)),
                    key=lambda c: c[1] * w + c[0])
                if node_next:
                    terminal = node_next[0]
                    path.append(terminal)
                    break
                plain = sorted((c for c in cand if not consumed[c[1], c[0]]),
                               key=lambda c: c[1] * w + c[0])
                if not plain:
                    break  # blind chain: dead end, discard
                cur2 = plain[0]
                consumed[cur2[1], cur2[0]] = True
                path.append(cur2)
                prev, cur = cur, cur2
            if terminal is None:
                continue
            a, b = node_cells[sc], node_cells[terminal]
            if a == b and len(path) <= 3:
                continue  # brushed another cell of the same cluster
            if len(path) == 2:
                pair = frozenset((sc, terminal))
                if pair in direct:
                    continue
                direct.add(pair)
            graph._add_edge(a, b, np.array(path))

    # Node-level dead ends: a degree-1 junction is a stub arm and erodes,
    # except when its edge is the last thing keeping a goal connected.
    # Goals themselves are never removed.
    goal_set = set(graph.goal_ids)
    changed = True
    while changed:
        changed = False
        for nid in sorted(graph.nodes):
            if nid in goal_set or len(graph.adjacency[nid]) != 1:
                continue
            eid = graph.adjacency[nid][0]
            other = graph.edges[eid].other(nid)
            if other in goal_set and len(graph.adjacency[other]) == 1:
                continue
            graph._remove_edge(eid)
            changed = True

    # Junctions stranded by pruning disappear; goals always stay.
    for nid in [n for n in list(graph.nodes) if n not in graph.goal_ids]:
        if not graph.adjacency[nid]:
            del graph.nodes[nid]
            del graph.adjacency[nid]
            graph._cell_to_node = {c: n for c, n in graph._cell_to_node.items() if n != nid}
            graph._mapped_cache = None

    return graph
