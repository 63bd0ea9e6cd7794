import json
import math

import numpy as np
import pytest

from conftest import make_layout
from vorintent.floorplan import (
    LayoutError,
    distance_transform,
    parse_layout,
    rasterize,
    serialize_layout,
)


def brute_force_edt(occupied, cell_size):
    """Independent oracle: per-cell scan over every obstacle cell."""
    h, w = occupied.shape
    ys, xs = np.nonzero(occupied)
    out = np.zeros((h, w))
    for iy in range(h):
        for ix in range(w):
            if occupied[iy, ix]:
                continue
            d2 = (ys - iy) ** 2 + (xs - ix) ** 2
            out[iy, ix] = np.sqrt(float(d2.min())) * cell_size
    return out


class TestParseLayout:
    def test_minimal_document(self):
        doc = parse_layout(make_layout(nodes=[("R1", 5.0, 5.0)], goals=["R1"]))
        assert len(doc.nodes) == 1
        assert doc.goals == ["R1"]
        assert doc.size == (10.0, 10.0)

    def test_laboratory_fixture(self, lab_layout):
        assert len(lab_layout.racks) == 12
        for goal in ("R117", "R108", "R17", "R109", "R16"):
            assert goal in lab_layout.goals
        # ids span R1..R117 sparsely
        assert "R1" in lab_layout.nodes and "R117" in lab_layout.nodes

    def test_node_on_rack_rejected(self):
        text = make_layout(racks=[(4.0, 4.0, 2.0, 2.0)],
                           nodes=[("R1", 5.0, 5.0)], goals=["R1"])
        with pytest.raises(LayoutError, match="occupied cell"):
            parse_layout(text)

    def test_duplicate_id_rejected(self):
        text = make_layout(nodes=[("R1", 2.0, 2.0), ("R1", 3.0, 3.0)], goals=["R1"])
        with pytest.raises(LayoutError, match="duplicate"):
            parse_layout(text)

    def test_unknown_goal_rejected(self):
        text = make_layout(nodes=[("R1", 2.0, 2.0)], goals=["R9"])
        with pytest.raises(LayoutError, match="unknown node"):
            parse_layout(text)

    def test_syntax_error_reports_position(self):
        with pytest.raises(LayoutError, match="line 1"):
            parse_layout("{broken")

    def test_under_rack_s_nodes_allowed(self, lab_layout, lab_grid):
        for nid, node in lab_layout.nodes.items():
            if nid.startswith("S"):
                assert not lab_grid.is_free_world(node.x, node.y)

    def test_serialize_round_trip(self, lab_text, lab_layout):
        doc2 = parse_layout(serialize_layout(lab_layout))
        assert doc2.size == lab_layout.size
        assert doc2.goals == lab_layout.goals
        assert set(doc2.nodes) == set(lab_layout.nodes)
        for nid in doc2.nodes:
            assert doc2.nodes[nid] == lab_layout.nodes[nid]
        assert doc2.racks == lab_layout.racks


class TestRasterize:
    def test_empty_floor_with_boundary_ring(self):
        doc = parse_layout(make_layout(size=(1.0, 1.0), cell=0.1))
        grid = rasterize(doc)
        assert (grid.width, grid.height) == (12, 12)
        assert grid.occupied[0].all() and grid.occupied[-1].all()
        assert grid.occupied[:, 0].all() and grid.occupied[:, -1].all()
        assert not grid.occupied[1:-1, 1:-1].any()

    def test_centered_rack_block(self):
        doc = parse_layout(make_layout(size=(2.0, 2.0), cell=0.1,
                                       racks=[(0.8, 0.8, 0.4, 0.4)]))
        grid = rasterize(doc)
        inner = grid.occupied[1:-1, 1:-1]
        ys, xs = np.nonzero(inner)
        assert len(ys) == 16  # 4x4 block
        assert xs.min() == 8 and xs.max() == 11
        assert ys.min() == 8 and ys.max() == 11

    def test_lab_r_nodes_on_free_cells(self, lab_layout, lab_grid):
        for nid, node in lab_layout.nodes.items():
            if not nid.startswith("S"):
                assert lab_grid.is_free_world(node.x, node.y), nid

    def test_monotone_under_added_racks(self):
        rng = np.random.default_rng(5)
        base_racks = [(2.0, 2.0, 1.0, 1.0)]
        doc = parse_layout(make_layout(racks=base_racks))
        occ0 = rasterize(doc).occupied
        for _ in range(10):
            x, y = rng.uniform(0.5, 7.5, 2)
            w, h = rng.uniform(0.3, 2.0, 2)
            doc2 = parse_layout(make_layout(racks=base_racks + [(x, y, w, h)]))
            occ1 = rasterize(doc2).occupied
            assert (occ1 | occ0 == occ1).all(), "adding a rack freed a cell"

    def test_cell_count_guard(self):
        doc = parse_layout(make_layout(size=(100.0, 100.0)))
        with pytest.raises(LayoutError, match="cell limit"):
            rasterize(doc, 0.005)

    def test_wall_segments_rasterize(self):
        text = make_layout(walls=[{"x1": 2.0, "y1": 5.0, "x2": 8.0, "y2": 5.0,
                                   "width": 0.2}])
        grid = rasterize(parse_layout(text))
        assert grid.occupied[grid.cell_of(5.0, 5.0)[1], grid.cell_of(5.0, 5.0)[0]]
        assert grid.is_free_world(5.0, 7.0)

    def test_pgm_export(self, lab_grid):
        data = lab_grid.to_pgm()
        header = f"P5\n{lab_grid.width} {lab_grid.height}\n255\n".encode()
        assert data.startswith(header)
        assert len(data) == len(header) + lab_grid.width * lab_grid.height


class TestDistanceTransform:
    def test_all_occupied_is_zero(self):
        doc = parse_layout(make_layout(size=(1.0, 1.0), cell=0.5,
                                       racks=[(0.0, 0.0, 1.0, 1.0)]))
        field = distance_transform(rasterize(doc))
        assert (field.meters == 0.0).all()

    def test_single_free_cell(self):
        doc = parse_layout(make_layout(size=(3.0, 3.0), cell=1.0,
                                       racks=[(0.0, 0.0, 3.0, 1.0),
                                              (0.0, 2.0, 3.0, 1.0),
                                              (0.0, 0.0, 1.0, 3.0),
                                              (2.0, 0.0, 1.0, 3.0)]))
        grid = rasterize(doc)
        field = distance_transform(grid)
        free = ~grid.occupied
        assert free.sum() == 1
        assert field.meters[free][0] == 1.0

    def test_zero_exactly_on_occupied(self, lab_grid, lab_field):
        assert (lab_field.meters[lab_grid.occupied] == 0.0).all()
        assert (lab_field.meters[~lab_grid.occupied] > 0.0).all()

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(42)
        occ = rng.random((64, 64)) < 0.18
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
        from vorintent.floorplan import OccupancyGrid
        grid = OccupancyGrid(width=64, height=64, cell_size=0.25,
                             origin=(0.0, 0.0), occupied=occ)
        field = distance_transform(grid)
        oracle = brute_force_edt(occ, 0.25)
        assert (field.meters == oracle).all()

    def test_lipschitz_between_neighbors(self, lab_field):
        m = lab_field.meters
        cs = lab_field.cell_size
        assert (np.abs(np.diff(m, axis=0)) <= cs + 1e-12).all()
        assert (np.abs(np.diff(m, axis=1)) <= cs + 1e-12).all()
