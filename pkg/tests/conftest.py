import json
from pathlib import Path

import pytest

from vorintent.floorplan import distance_transform, parse_layout, rasterize
from vorintent.sim import fixture_path
from vorintent.voronoi import build_skeleton, extract_graph

LAB_GOALS = ["R117", "R17", "R109"]


@pytest.fixture(scope="session")
def lab_text():
    return fixture_path("laboratory.json").read_text()


@pytest.fixture(scope="session")
def lab_layout(lab_text):
    return parse_layout(lab_text)


@pytest.fixture(scope="session")
def lab_grid(lab_layout):
    return rasterize(lab_layout)


@pytest.fixture(scope="session")
def lab_field(lab_grid):
    return distance_transform(lab_grid)


@pytest.fixture(scope="session")
def lab_skeleton(lab_field):
    return build_skeleton(lab_field)


@pytest.fixture(scope="session")
def lab_graph(lab_skeleton, lab_layout):
    return extract_graph(lab_skeleton, lab_layout, goals=LAB_GOALS)


def make_layout(size=(10.0, 10.0), cell=0.1, racks=(), nodes=(), goals=(), walls=()):
    """Small helper to build layout documents inline."""
    return json.dumps({
        "size_m": list(size),
        "cell_size_m": cell,
        "racks": [dict(zip("xywh", r)) if isinstance(r, (tuple, list)) else r
                  for r in racks],
        "walls": list(walls),
        "nodes": [{"id": n[0], "x": n[1], "y": n[2]} for n in nodes],
        "goals": list(goals),
    })
