import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdnav.gridmap import (CellState, GlobalPath, GlobalPlanner, MapError, OccupancyGrid, PlanningError,
                              WorldPoint, distance_transform, load_map, next_subgoal, plan_global_path,
                              save_map, write_pgm)

from conftest import dijkstra_oracle, make_grid


def _write_map(tmp_path, image, **meta):
    m = {"resolution": 0.1, "origin_x": 0.0, "origin_y": 0.0, "free_thresh": 250, "occupied_thresh": 50}
    m.update(meta)
    write_pgm(tmp_path / "m.pgm", np.asarray(image, dtype=np.uint8))
    (tmp_path / "m.meta").write_text("".join(f"{k}: {v}\n" for k, v in m.items()))
    return tmp_path / "m.pgm"


# --- load_map ---------------------------------------------------------------

def test_load_all_white(tmp_path):
    g = load_map(_write_map(tmp_path, np.full((4, 4), 255)))
    assert (g.width, g.height, g.resolution) == (4, 4, 0.1)
    assert (g.cells == CellState.FREE).all()


def test_load_thresholds(tmp_path):
    g = load_map(_write_map(tmp_path, [[254, 0], [128, 254]]))
    # top image row is max y, so it lands in grid row 1
    assert g.cells[1].tolist() == [CellState.FREE, CellState.OCCUPIED]
    assert g.cells[0].tolist() == [CellState.UNKNOWN, CellState.FREE]


def test_load_dimension_mismatch(tmp_path):
    with pytest.raises(MapError, match="declares 3x3"):
        load_map(_write_map(tmp_path, np.full((2, 2), 255), width=3, height=3))


def test_load_errors(tmp_path):
    with pytest.raises(MapError):
        load_map(tmp_path / "nope.pgm")
    with pytest.raises(MapError, match="resolution"):
        load_map(_write_map(tmp_path, np.full((2, 2), 255), resolution=0))
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    (tmp_path / "bad.meta").write_text((tmp_path / "m.meta").read_text())
    with pytest.raises(MapError):
        load_map(tmp_path / "bad.pgm")


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 3, size=(7, 11)).astype(np.uint8)
    g = OccupancyGrid(cells, 0.25, (-1.5, 2.0))
    save_map(g, tmp_path / "r.pgm")
    back = load_map(tmp_path / "r.pgm")
    assert np.array_equal(back.cells, g.cells)
    assert back.origin == g.origin and back.resolution == g.resolution


def test_grid_validation():
    with pytest.raises(MapError):
        OccupancyGrid(np.zeros((0, 3)), 1.0)
    with pytest.raises(MapError):
        OccupancyGrid(np.zeros((2, 2)), -1.0)
    with pytest.raises(ValueError):
        WorldPoint(float("nan"), 0.0)


@given(st.integers(1, 30), st.integers(1, 30), st.floats(0.01, 2.0), st.floats(-50, 50), st.floats(-50, 50))
def test_index_roundtrip(w, h, res, ox, oy):
    g = OccupancyGrid(np.zeros((h, w), dtype=np.uint8), res, (ox, oy))
    iy, ix = np.indices((h, w))
    bx, by = g.world_to_grid(*g.grid_to_world(ix.ravel(), iy.ravel()))
    assert np.array_equal(bx, ix.ravel()) and np.array_equal(by, iy.ravel())


# --- distance transform -----------------------------------------------------

def _edt_oracle(blocked, res):
    occ = np.argwhere(blocked)
    out = np.zeros(blocked.shape)
    for (y, x), _ in np.ndenumerate(blocked):
        out[y, x] = min(math.hypot(y - oy, x - ox) for oy, ox in occ) * res
    return out


def test_edt_row():
    assert distance_transform(make_grid(["#.."])).tolist() == [[0.0, 1.0, 2.0]]


def test_edt_center_cell():
    d = distance_transform(make_grid([".....", ".....", "..#..", ".....", "....."]))
    assert d[0, 0] == pytest.approx(2 * math.sqrt(2))
    assert np.allclose(d, _edt_oracle(d == 0, 1.0))


def test_edt_all_free_is_boundary_distance():
    d = distance_transform(OccupancyGrid(np.zeros((3, 5), dtype=np.uint8), 0.5))
    assert np.isfinite(d).all()
    assert d[1, 2] == pytest.approx(1.0)  # two cells to the top/bottom outside cell
    assert d[0, 0] == pytest.approx(0.5)


def test_unknown_counts_as_blocked():
    assert distance_transform(make_grid(["?.."])).tolist() == [[0.0, 1.0, 2.0]]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_edt_oracle_and_rotation(h, w, seed):
    rng = np.random.default_rng(seed)
    cells = (rng.random((h, w)) < 0.2).astype(np.uint8)
    cells[rng.integers(h), rng.integers(w)] = CellState.OCCUPIED
    d = distance_transform(OccupancyGrid(cells, 0.3))
    assert np.allclose(d, _edt_oracle(cells == 1, 0.3))
    rot = distance_transform(OccupancyGrid(np.rot90(cells), 0.3))
    assert np.allclose(rot, np.rot90(d))


# --- planning ---------------------------------------------------------------

def _check_path(grid, path, passable):
    steps = np.hypot(*np.diff(path.waypoints, axis=0).T)
    assert (steps <= math.sqrt(2) * grid.resolution + 1e-9).all()
    ix, iy = grid.world_to_grid(path.waypoints[:, 0], path.waypoints[:, 1])
    assert passable[iy, ix].all()


def test_straight_corridor():
    g = OccupancyGrid(np.zeros((10, 10), dtype=np.uint8), 1.0)
    p = plan_global_path(g, WorldPoint(0.5, 0.5), WorldPoint(0.5, 5.5))
    assert abs(p.total_length - 5.0) <= 1.0
    assert p.waypoints[0].tolist() == [0.5, 0.5] and p.waypoints[-1].tolist() == [0.5, 5.5]


def test_walled_goal():
    rows = ["......", "..###.", "..#.#.", "..###.", "......"]
    with pytest.raises(PlanningError, match="no path"):
        plan_global_path(make_grid(rows), (0.5, 0.5), (3.5, 2.5))


def test_start_in_collision():
    g = make_grid(["#...", "...."])
    with pytest.raises(PlanningError, match="start"):
        plan_global_path(g, (0.5, 1.5), (3.5, 0.5))
    assert len(GlobalPlanner(g, 0.0).plan((0.5, 1.5), (3.5, 0.5), snap=True)) > 1


def test_wall_with_gap_matches_oracle():
    cells = np.zeros((20, 20), dtype=np.uint8)
    cells[:, 10] = CellState.OCCUPIED
    cells[14, 10] = CellState.FREE
    g = OccupancyGrid(cells, 1.0)
    p = plan_global_path(g, (2.5, 3.5), (17.5, 2.5))
    ref = dijkstra_oracle(g.free, (3, 2), (2, 17), 1.0)
    assert p.total_length == pytest.approx(ref, abs=1e-9)
    _check_path(g, p, g.free)


def test_inflation_narrows_passage():
    cells = np.zeros((9, 9), dtype=np.uint8)
    cells[:, 4] = CellState.OCCUPIED
    cells[4, 4] = CellState.FREE
    g = OccupancyGrid(cells, 1.0)
    plan_global_path(g, (0.5, 0.5), (8.5, 0.5), inflation=0.0)
    with pytest.raises(PlanningError):
        plan_global_path(g, (0.5, 4.5), (8.5, 4.5), inflation=1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 50), st.integers(2, 50), st.floats(0.0, 0.4), st.integers(0, 2**31 - 1))
def test_planner_matches_oracle(h, w, density, seed):
    rng = np.random.default_rng(seed)
    cells = (rng.random((h, w)) < density).astype(np.uint8)
    free = np.argwhere(cells == 0)
    if len(free) < 2:
        return
    (sy, sx), (gy, gx) = free[rng.choice(len(free), 2, replace=False)]
    g = OccupancyGrid(cells, 0.5)
    ref = dijkstra_oracle(g.free, (sy, sx), (gy, gx), 0.5)
    start, goal = g.grid_to_world(sx, sy), g.grid_to_world(gx, gy)
    if math.isinf(ref):
        with pytest.raises(PlanningError):
            plan_global_path(g, start, goal)
        return
    p = plan_global_path(g, start, goal)
    assert p.total_length == pytest.approx(ref, rel=1e-9, abs=1e-9)
    _check_path(g, p, g.free)


# --- sub-goals --------------------------------------------------------------

def _straight(n=11):
    wps = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    return GlobalPath(wps, float(n - 1))


def test_subgoal_arc_length():
    assert next_subgoal(_straight(), (0.0, 0.0), 2.0) == WorldPoint(2.0, 0.0)


def test_subgoal_saturates():
    assert next_subgoal(_straight(), (9.5, 0.0), 2.0) == WorldPoint(10.0, 0.0)


def test_subgoal_l_path():
    # unit-spaced L: (0,0) .. (3,0) then up to (3,3); pose at the corner
    wps = np.array([[0, 0], [1, 0], [2, 0], [3, 0], [3, 1], [3, 2], [3, 3]], dtype=float)
    assert next_subgoal(GlobalPath(wps, 6.0), (3.0, 0.0), 1.0) == WorldPoint(3.0, 1.0)


def test_subgoal_empty():
    with pytest.raises(ValueError):
        next_subgoal(GlobalPath(np.zeros((0, 2)), 0.0), (0, 0), 1.0)


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=20),
       st.floats(-12, 12), st.floats(-12, 12), st.floats(0, 30))
def test_subgoal_on_polyline(pts, px, py, look):
    wps = np.array(pts, dtype=float)
    sg = next_subgoal(GlobalPath(wps, 0.0), (px, py), look)
    assert any(np.array_equal(sg.as_array(), w) for w in wps)
