"""Occupancy grids, map file I/O, clearance fields and the Dijkstra global planner.

Cells are stored as a ``(height, width)`` uint8 array indexed ``[iy, ix]`` with
row 0 at the *minimum* world y.  Map images use the usual image convention
(top row = maximum y) and are flipped on load/save.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

SQRT2 = math.sqrt(2.0)
DEFAULT_RESOLUTION = 0.05


class CellState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


class MapError(ValueError):
    """Raised for unreadable or inconsistent map files."""


class PlanningError(RuntimeError):
    """Raised when no global path can be produced."""


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(eq=False)
class OccupancyGrid:
    cells: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise MapError(f"grid must be 2-D and non-empty, got shape {cells.shape}")
        if not self.resolution > 0:
            raise MapError(f"resolution must be positive, got {self.resolution}")
        if cells.max(initial=0) > CellState.UNKNOWN:
            raise MapError("cell values must be FREE/OCCUPIED/UNKNOWN")
        cells.setflags(write=False)
        self.cells = cells
        self.resolution = float(self.resolution)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in world coordinates."""
        ox, oy = self.origin
        return ox, oy, ox + self.width * self.resolution, oy + self.height * self.resolution

    @property
    def blocked(self) -> np.ndarray:
        """Boolean mask of cells that stop rays and robots (Occupied or Unknown)."""
        if "blocked" not in self._cache:
            b = self.cells != CellState.FREE
            b.setflags(write=False)
            self._cache["blocked"] = b
        return self._cache["blocked"]

    @property
    def free(self) -> np.ndarray:
        return ~self.blocked

    def clearance(self) -> np.ndarray:
        """Cached :func:`distance_transform` of this grid."""
        if "clearance" not in self._cache:
            d = distance_transform(self)
            d.setflags(write=False)
            self._cache["clearance"] = d
        return self._cache["clearance"]

    def nearest_obstacle_vectors(self) -> np.ndarray:
        """Per-cell world-frame offset (dx, dy) to the nearest blocked cell center."""
        if "nearest" not in self._cache:
            blocked = self.blocked
            if not blocked.any():
                vec = np.full(blocked.shape + (2,), np.nan)
            else:
                _, (iy, ix) = ndimage.distance_transform_edt(~blocked, return_indices=True)
                gy, gx = np.indices(blocked.shape)
                vec = np.stack([(ix - gx), (iy - gy)], axis=-1) * self.resolution
            vec.setflags(write=False)
            self._cache["nearest"] = vec
        return self._cache["nearest"]

    def world_to_grid(self, x, y):
        """Return (ix, iy) integer cell indices; works on scalars or arrays."""
        ix = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.resolution).astype(np.int64)
        if ix.ndim == 0:
            return int(ix), int(iy)
        return ix, iy

    def grid_to_world(self, ix, iy):
        """Cell center of (ix, iy) in world coordinates."""
        x = self.origin[0] + (np.asarray(ix, dtype=float) + 0.5) * self.resolution
        y = self.origin[1] + (np.asarray(iy, dtype=float) + 0.5) * self.resolution
        if x.ndim == 0:
            return float(x), float(y)
        return x, y

    def in_bounds(self, ix, iy):
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def is_free_world(self, x: float, y: float) -> bool:
        ix, iy = self.world_to_grid(x, y)
        return bool(self.in_bounds(ix, iy) and not self.blocked[iy, ix])

    def free_cell_centers(self) -> np.ndarray:
        iy, ix = np.nonzero(self.free)
        x, y = self.grid_to_world(ix, iy)
        return np.column_stack([np.atleast_1d(x), np.atleast_1d(y)])


# --------------------------------------------------------------------------
# Map file I/O
# --------------------------------------------------------------------------

META_KEYS = ("resolution", "origin_x", "origin_y", "free_thresh", "occupied_thresh")


def meta_path_for(image_path: str | os.PathLike) -> Path:
    return Path(image_path).with_suffix(".meta")


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        if pos >= len(data):
            raise MapError(f"{path}: truncated PGM header")
        c = data[pos:pos + 1]
        if c == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise MapError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise MapError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise MapError(f"{path}: unsupported PGM dimensions/maxval {width}x{height}/{maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos) \
        if len(data) - pos >= width * height else None
    if pixels is None:
        raise MapError(f"{path}: pixel data shorter than {width}x{height}")
    return pixels.reshape(height, width)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_meta(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise MapError(f"missing map metadata file {path}")
    meta: dict[str, float] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise MapError(f"{path}:{lineno}: expected 'key: value'")
        try:
            meta[key.strip()] = float(value)
        except ValueError as exc:
            raise MapError(f"{path}:{lineno}: non-numeric value for {key.strip()!r}") from exc
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise MapError(f"{path}: missing keys {missing}")
    return meta


def load_map(path: str | os.PathLike) -> OccupancyGrid:
    """Load a PGM occupancy image plus its ``.meta`` sidecar."""
    path = Path(path)
    if not path.exists():
        raise MapError(f"missing map image {path}")
    meta = read_meta(meta_path_for(path))
    if meta["resolution"] <= 0:
        raise MapError(f"{path}: non-positive resolution {meta['resolution']}")
    image = _read_pgm(path)
    h, w = image.shape
    if "width" in meta and int(meta["width"]) != w or "height" in meta and int(meta["height"]) != h:
        raise MapError(
            f"{path}: metadata declares {int(meta.get('width', w))}x{int(meta.get('height', h))}"
            f" but image is {w}x{h}")
    cells = np.full(image.shape, CellState.UNKNOWN, dtype=np.uint8)
    cells[image >= meta["free_thresh"]] = CellState.FREE
    cells[image <= meta["occupied_thresh"]] = CellState.OCCUPIED
    return OccupancyGrid(cells[::-1].copy(), meta["resolution"], (meta["origin_x"], meta["origin_y"]))


def save_map(grid: OccupancyGrid, path: str | os.PathLike,
             free_thresh: int = 250, occupied_thresh: int = 50) -> None:
    """Write ``grid`` as PGM + ``.meta`` so that :func:`load_map` round-trips it."""
    image = np.full(grid.cells.shape, 205, dtype=np.uint8)
    image[grid.cells == CellState.FREE] = 254
    image[grid.cells == CellState.OCCUPIED] = 0
    write_pgm(path, image[::-1])
    lines = [
        f"resolution: {grid.resolution!r}",
        f"origin_x: {grid.origin[0]!r}",
        f"origin_y: {grid.origin[1]!r}",
        f"free_thresh: {free_thresh}",
        f"occupied_thresh: {occupied_thresh}",
        f"width: {grid.width}",
        f"height: {grid.height}",
    ]
    meta_path_for(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Clearance
# --------------------------------------------------------------------------

def distance_transform(grid: OccupancyGrid) -> np.ndarray:
    """Euclidean distance (m) from every cell center to the nearest blocked cell center.

    A grid without any blocked cell measures distance to the cell just outside
    the boundary instead, so the result is always finite.
    """
    blocked = grid.blocked
    if blocked.any():
        return ndimage.distance_transform_edt(~blocked) * grid.resolution
    padded = np.pad(np.ones(blocked.shape, dtype=bool), 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1] * grid.resolution


# --------------------------------------------------------------------------
# Global planning
# --------------------------------------------------------------------------

@dataclass
class GlobalPath:
    waypoints: np.ndarray  # (n, 2) world coordinates
    total_length: float

    def __len__(self):
        return len(self.waypoints)


# neighbor offsets (dy, dx); first four are axis-aligned
_NBR = np.array([[0, 1], [1, 0], [0, -1], [-1, 0], [1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.int64)


@numba.njit(cache=True)
def _dijkstra_field(passable, goal_y, goal_x, res):
    """Cost-to-goal over 8-connected passable cells (diagonal cost sqrt(2)*res).

    Diagonal moves require both adjacent axis-aligned cells to be passable.
    """
    h, w = passable.shape
    dist = np.full((h, w), np.inf)
    done = np.zeros((h, w), dtype=np.bool_)
    dist[goal_y, goal_x] = 0.0
    heap = [(0.0, goal_y * w + goal_x)]
    diag = math.sqrt(2.0) * res
    while len(heap) > 0:
        d, idx = heapq_pop(heap)
        cy = idx // w
        cx = idx - cy * w
        if done[cy, cx]:
            continue
        done[cy, cx] = True
        for k in range(8):
            dy = _NBR[k, 0]
            dx = _NBR[k, 1]
            ny = cy + dy
            nx = cx + dx
            if ny < 0 or ny >= h or nx < 0 or nx >= w or not passable[ny, nx]:
                continue
            if k >= 4:
                if not passable[cy + dy, cx] or not passable[cy, cx + dx]:
                    continue
                nd = d + diag
            else:
                nd = d + res
            if nd < dist[ny, nx]:
                dist[ny, nx] = nd
                heapq_push(heap, (nd, ny * w + nx))
    return dist


@numba.njit(cache=True)
def heapq_push(heap, item):
    heap.append(item)
    i = len(heap) - 1
    while i > 0:
        parent = (i - 1) >> 1
        if heap[parent][0] <= heap[i][0]:
            break
        heap[parent], heap[i] = heap[i], heap[parent]
        i = parent


@numba.njit(cache=True)
def heapq_pop(heap):
    top = heap[0]
    last = heap.pop()
    n = len(heap)
    if n > 0:
        heap[0] = last
        i = 0
        while True:
            left = 2 * i + 1
            if left >= n:
                break
            child = left
            right = left + 1
            if right < n and heap[right][0] < heap[left][0]:
                child = right
            if heap[i][0] <= heap[child][0]:
                break
            heap[i], heap[child] = heap[child], heap[i]
            i = child
    return top


@numba.njit(cache=True)
def _trace_descent(dist, passable, sy, sx, res):
    """Follow the cost field downhill from (sy, sx); returns cell list (n, 2) as (y, x)."""
    h, w = dist.shape
    out = np.empty((h * w, 2), dtype=np.int64)
    n = 0
    cy, cx = sy, sx
    diag = math.sqrt(2.0) * res
    out[0, 0] = cy
    out[0, 1] = cx
    n = 1
    while dist[cy, cx] > 0.0:
        best = dist[cy, cx]
        by, bx = -1, -1
        for k in range(8):
            dy = _NBR[k, 0]
            dx = _NBR[k, 1]
            ny = cy + dy
            nx = cx + dx
            if ny < 0 or ny >= h or nx < 0 or nx >= w or not passable[ny, nx]:
                continue
            if k >= 4:
                if not passable[cy + dy, cx] or not passable[cy, cx + dx]:
                    continue
                step = diag
            else:
                step = res
            cand = dist[ny, nx] + step
            # strict descent along an optimal edge (tolerant to float rounding)
            if dist[ny, nx] < best and cand <= dist[cy, cx] + 1e-9:
                best = dist[ny, nx]
                by, bx = ny, nx
        if by < 0:
            break
        cy, cx = by, bx
        out[n, 0] = cy
        out[n, 1] = cx
        n += 1
    return out[:n]


def inflated_passable(grid: OccupancyGrid, inflation: float) -> np.ndarray:
    """Free cells whose clearance is at least ``inflation``."""
    key = ("passable", float(inflation))
    if key not in grid._cache:
        p = grid.free & (grid.clearance() >= inflation) if inflation > 0 else grid.free.copy()
        p.setflags(write=False)
        grid._cache[key] = p
    return grid._cache[key]


def _path_from_cells(grid: OccupancyGrid, cells: np.ndarray) -> GlobalPath:
    xs, ys = grid.grid_to_world(cells[:, 1], cells[:, 0])
    wps = np.column_stack([np.atleast_1d(xs), np.atleast_1d(ys)])
    length = float(np.hypot(*np.diff(wps, axis=0).T).sum()) if len(wps) > 1 else 0.0
    return GlobalPath(wps, length)


class GlobalPlanner:
    """Dijkstra planner that caches the cost-to-goal field per goal cell.

    Re-planning toward the same goal only re-traces the cached field, which is
    what makes the periodic re-plan from the latest pose estimate cheap.
    """

    def __init__(self, grid: OccupancyGrid, inflation: float):
        self.grid = grid
        self.inflation = float(inflation)
        self.passable = inflated_passable(grid, inflation)
        self._fields: dict[tuple[int, int], np.ndarray] = {}

    def _cell(self, p: WorldPoint | tuple[float, float], what: str, snap: bool) -> tuple[int, int]:
        x, y = (p.x, p.y) if isinstance(p, WorldPoint) else p
        ix, iy = self.grid.world_to_grid(x, y)
        if self.grid.in_bounds(ix, iy) and self.passable[iy, ix]:
            return iy, ix
        if not snap:
            raise PlanningError(f"{what} ({x:.2f}, {y:.2f}) is in collision after inflation")
        cand = np.argwhere(self.passable)
        if len(cand) == 0:
            raise PlanningError("map has no passable cell")
        d2 = (cand[:, 0] - iy) ** 2 + (cand[:, 1] - ix) ** 2
        cy, cx = cand[int(np.argmin(d2))]
        return int(cy), int(cx)

    def cost_field(self, goal_cell: tuple[int, int]) -> np.ndarray:
        if goal_cell not in self._fields:
            if len(self._fields) > 32:
                self._fields.clear()
            self._fields[goal_cell] = _dijkstra_field(self.passable, goal_cell[0], goal_cell[1],
                                                      self.grid.resolution)
        return self._fields[goal_cell]

    def plan(self, start, goal, snap: bool = False) -> GlobalPath:
        sy, sx = self._cell(start, "start", snap)
        gy, gx = self._cell(goal, "goal", snap)
        field_ = self.cost_field((gy, gx))
        if not np.isfinite(field_[sy, sx]):
            raise PlanningError("no path between start and goal")
        cells = _trace_descent(field_, self.passable, sy, sx, self.grid.resolution)
        return _path_from_cells(self.grid, cells)

    def path_cost(self, start, goal, snap: bool = False) -> float:
        sy, sx = self._cell(start, "start", snap)
        gy, gx = self._cell(goal, "goal", snap)
        return float(self.cost_field((gy, gx))[sy, sx])


def plan_global_path(grid: OccupancyGrid, start, goal, inflation: float = 0.0) -> GlobalPath:
    """Shortest 8-connected path from the start cell to the goal cell through inflated-free space."""
    return GlobalPlanner(grid, inflation).plan(start, goal)


def next_subgoal(path: GlobalPath, pose, lookahead: float) -> WorldPoint:
    """First waypoint at least ``lookahead`` of arc length past the waypoint nearest ``pose``."""
    wps = np.asarray(path.waypoints, dtype=float)
    if len(wps) == 0:
        raise ValueError("empty path")
    px, py = (pose.x, pose.y) if isinstance(pose, WorldPoint) else (pose[0], pose[1])
    i0 = int(np.argmin((wps[:, 0] - px) ** 2 + (wps[:, 1] - py) ** 2))
    seg = np.hypot(*np.diff(wps[i0:], axis=0).T) if len(wps) - i0 > 1 else np.zeros(0)
    arc = np.cumsum(seg)
    hit = np.nonzero(arc >= lookahead - 1e-12)[0]
    j = i0 + 1 + int(hit[0]) if len(hit) else len(wps) - 1
    return WorldPoint(float(wps[j, 0]), float(wps[j, 1]))
