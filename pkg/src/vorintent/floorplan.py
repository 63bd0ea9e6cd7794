"""Warehouse layout ingestion: JSON layout documents, occupancy grids and the
obstacle distance field that seeds skeleton extraction.

Layout JSON schema (UTF-8)::

    {
      "size_m": [w, h],
      "cell_size_m": 0.05,
      "racks": [{"x": f, "y": f, "w": f, "h": f}, ...],
      "walls": [{"x1": f, "y1": f, "x2": f, "y2": f, "width": f}, ...],
      "nodes": [{"id": "R32", "x": f, "y": f}, ...],
      "goals": ["R117", ...],
      "stations": ["P", ...]
    }

Grids are padded with a one-cell occupied boundary ring (closed world), so a
w x h metre floor at cell size c becomes a (w/c + 2) x (h/c + 2) grid with
origin (-c, -c).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Guard against absurd resolutions (e.g. 5 mm cells on a football field).
MAX_CELLS = 64_000_000

# Tolerance when converting metric rectangle edges to cell indices, so that
# rack edges landing exactly on a cell boundary do not bleed into the
# neighbouring cell because of float division noise.
_EDGE_EPS = 1e-9


class LayoutError(ValueError):
    """Raised for malformed or inconsistent layout documents."""


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class WallSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    width: float = 0.1


@dataclass(frozen=True)
class GroundNode:
    id: str
    x: float
    y: float


@dataclass
class LayoutDocument:
    """Parsed warehouse layout: geometry plus named ground nodes and goals."""

    size: tuple[float, float]
    cell_size: float
    racks: list[Rect]
    walls: list[WallSegment]
    nodes: dict[str, GroundNode]
    goals: list[str]
    stations: list[str] = field(default_factory=list)

    def node_position(self, node_id: str) -> tuple[float, float]:
        node = self.nodes[node_id]
        return (node.x, node.y)


@dataclass
class OccupancyGrid:
    """Discretised floorplan. `occupied` is indexed [iy, ix]."""

    width: int
    height: int
    cell_size: float
    origin: tuple[float, float]
    occupied: np.ndarray

    def __post_init__(self):
        assert self.occupied.shape == (self.height, self.width)
        assert self.cell_size > 0

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.cell_size))
        iy = int(math.floor((y - self.origin[1]) / self.cell_size))
        return ix, iy

    def center_of(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.cell_size,
            self.origin[1] + (iy + 0.5) * self.cell_size,
        )

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_free_world(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.in_bounds(ix, iy) and not self.occupied[iy, ix]

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width * self.cell_size, self.height * self.cell_size)

    def to_pgm(self) -> bytes:
        """P5 binary PGM, 0 = occupied, 255 = free; top row first."""
        img = np.where(self.occupied, 0, 255).astype(np.uint8)[::-1]
        header = f"P5\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + img.tobytes()


@dataclass
class DistanceField:
    """Per-cell exact Euclidean distance (metres) to the nearest occupied
    cell center. Zero exactly on occupied cells."""

    meters: np.ndarray
    cell_size: float
    origin: tuple[float, float]


def parse_layout(text: str) -> LayoutDocument:
    """Parse and validate a layout JSON document.

    Checks structural validity, unique node ids, goal references and that
    every named node lands on a free cell at the document's cell size.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(
            f"layout syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise LayoutError("layout document must be a JSON object")

    try:
        size = (float(raw["size_m"][0]), float(raw["size_m"][1]))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise LayoutError("layout missing valid 'size_m': [w, h]") from exc
    if size[0] <= 0 or size[1] <= 0:
        raise LayoutError("'size_m' must be positive")
    cell_size = float(raw.get("cell_size_m", 0.05))
    if cell_size <= 0:
        raise LayoutError("'cell_size_m' must be > 0")

    racks = []
    for i, r in enumerate(raw.get("racks", [])):
        try:
            rect = Rect(float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"rack #{i} malformed: needs x, y, w, h") from exc
        if rect.w <= 0 or rect.h <= 0:
            raise LayoutError(f"rack #{i} has non-positive extent")
        racks.append(rect)

    walls = []
    for i, w in enumerate(raw.get("walls", [])):
        try:
            walls.append(
                WallSegment(
                    float(w["x1"]), float(w["y1"]),
                    float(w["x2"]), float(w["y2"]),
                    float(w.get("width", 0.1)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"wall #{i} malformed: needs x1, y1, x2, y2") from exc

    nodes: dict[str, GroundNode] = {}
    for i, n in enumerate(raw.get("nodes", [])):
        try:
            node = GroundNode(str(n["id"]), float(n["x"]), float(n["y"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"node #{i} malformed: needs id, x, y") from exc
        if node.id in nodes:
            raise LayoutError(f"duplicate node id {node.id!r}")
        nodes[node.id] = node

    goals = [str(g) for g in raw.get("goals", [])]
    for g in goals:
        if g not in nodes:
            raise LayoutError(f"goal {g!r} references unknown node")
    if len(set(goals)) != len(goals):
        raise LayoutError("duplicate goal declaration")

    stations = [str(s) for s in raw.get("stations", [])]
    for s in stations:
        if s not in nodes:
            raise LayoutError(f"station {s!r} references unknown node")

    doc = LayoutDocument(
        size=size, cell_size=cell_size, racks=racks, walls=walls,
        nodes=nodes, goals=goals, stations=stations,
    )

    grid = rasterize(doc, cell_size)
    for node in nodes.values():
        # S-prefixed nodes sit under liftable racks (robot-only positions);
        # every other named node must be worker-reachable.
        if node.id.startswith("S"):
            continue
        if not grid.is_free_world(node.x, node.y):
            raise LayoutError(f"node {node.id!r} on occupied cell at ({node.x}, {node.y})")
    return doc


def serialize_layout(doc: LayoutDocument) -> str:
    """Inverse of parse_layout for canonical documents."""
    raw = {
        "size_m": [doc.size[0], doc.size[1]],
        "cell_size_m": doc.cell_size,
        "racks": [{"x": r.x, "y": r.y, "w": r.w, "h": r.h} for r in doc.racks],
        "walls": [
            {"x1": w.x1, "y1": w.y1, "x2": w.x2, "y2": w.y2, "width": w.width}
            for w in doc.walls
        ],
        "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in doc.nodes.values()],
        "goals": list(doc.goals),
        "stations": list(doc.stations),
    }
    return json.dumps(raw, indent=2)


def _rect_cells(x0: float, y0: float, x1: float, y1: float, cell: float,
                origin: tuple[float, float]) -> tuple[int, int, int, int]:
    """Half-open cell index span covering the metric rectangle."""
    ix0 = int(math.floor((x0 - origin[0]) / cell + _EDGE_EPS))
    iy0 = int(math.floor((y0 - origin[1]) / cell + _EDGE_EPS))
    ix1 = int(math.ceil((x1 - origin[0]) / cell - _EDGE_EPS))
    iy1 = int(math.ceil((y1 - origin[1]) / cell - _EDGE_EPS))
    return ix0, iy0, ix1, iy1


def rasterize(layout: LayoutDocument, cell_size: float | None = None) -> OccupancyGrid:
    """Rasterise racks and walls to an occupancy grid with a forced occupied
    boundary ring around the floor."""
    cell = layout.cell_size if cell_size is None else float(cell_size)
    if cell <= 0:
        raise LayoutError("cell_size must be > 0")
    nx = int(round(layout.size[0] / cell))
    ny = int(round(layout.size[1] / cell))
    if nx < 1 or ny < 1:
        raise LayoutError("cell_size larger than the floor")
    width, height = nx + 2, ny + 2
    if width * height > MAX_CELLS:
        raise LayoutError(
            f"grid of {width}x{height} cells exceeds the {MAX_CELLS} cell limit; "
            f"use a coarser cell_size"
        )
    origin = (-cell, -cell)
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True

    for r in layout.racks:
        ix0, iy0, ix1, iy1 = _rect_cells(r.x, r.y, r.x + r.w, r.y + r.h, cell, origin)
        occ[max(iy0, 0):min(iy1, height), max(ix0, 0):min(ix1, width)] = True

    if layout.walls:
        cx, cy = np.meshgrid(
            origin[0] + (np.arange(width) + 0.5) * cell,
            origin[1] + (np.arange(height) + 0.5) * cell,
        )
        for w in layout.walls:
            occ |= _segment_mask(cx, cy, w, cell)

    return OccupancyGrid(width=width, height=height, cell_size=cell,
                         origin=origin, occupied=occ)


def _segment_mask(cx: np.ndarray, cy: np.ndarray, w: WallSegment, cell: float) -> np.ndarray:
    """Cells whose center lies within width/2 + half a cell of the segment."""
    dx, dy = w.x2 - w.x1, w.y2 - w.y1
    L2 = dx * dx + dy * dy
    if L2 == 0:
        t = np.zeros_like(cx)
    else:
        t = np.clip(((cx - w.x1) * dx + (cy - w.y1) * dy) / L2, 0.0, 1.0)
    px, py = w.x1 + t * dx, w.y1 + t * dy
    dist = np.hypot(cx - px, cy - py)
    return dist <= w.width / 2.0 + cell / 2.0


def distance_transform(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance (metres) to the nearest occupied cell center."""
    free = ~grid.occupied
    if not free.any():
        meters = np.zeros_like(grid.occupied, dtype=float)
    else:
        # Computed in cell units first so the result is sqrt of an integer,
        # bit-identical to a brute-force nearest-obstacle scan.
        meters = ndimage.distance_transform_edt(free) * grid.cell_size
    return DistanceField(meters=meters, cell_size=grid.cell_size, origin=grid.origin)
