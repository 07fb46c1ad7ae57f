"""Recovery-point extraction from the static map and online recovery-point selection.

Offline: Harris corners on the occupancy image, K-means with split
refinement, centroids pushed into passages along the clearance field, and a
preference weight per cluster proportional to its corner count.

Online: every candidate gets a fused score from the critic's accessibility
value, its preference weight and its relative distance to the final goal.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gridmap import CellState, OccupancyGrid, WorldPoint

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.5, 0.2, 1.0)  # omega_rl, omega_cp, omega_d


class RecoveryError(ValueError):
    pass


@dataclass(frozen=True)
class CornerPoint:
    position: WorldPoint
    response: float
    cell: tuple[int, int]  # (iy, ix)


@dataclass(frozen=True)
class RecoveryPoint:
    position: WorldPoint
    weight: float
    cluster_size: int
    cluster_id: int


@dataclass(frozen=True)
class RecoveryScore:
    v_rl: float
    v_cp: float
    v_d: float
    fused: float

    @classmethod
    def fuse(cls, v_rl, v_cp, v_d, weights=DEFAULT_WEIGHTS) -> "RecoveryScore":
        w_rl, w_cp, w_d = weights
        return cls(float(v_rl), float(v_cp), float(v_d), w_rl * v_rl + w_cp * v_cp + w_d * v_d)


@dataclass
class HarrisParams:
    sigma: float = 2.0  # cells
    k: float = 0.04
    rel_thresh: float = 0.01
    nms_radius: int = 4  # cells


# --------------------------------------------------------------------------
# Corners
# --------------------------------------------------------------------------

def harris_response(image: np.ndarray, sigma: float = 2.0, k: float = 0.04) -> np.ndarray:
    """det(M) - k trace(M)^2 with M the Gaussian-smoothed structure tensor."""
    img = image.astype(float)
    iy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    ix = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def detect_corners(grid: OccupancyGrid, k_harris: float = 0.04, response_thresh: float | None = None,
                   nms_radius: int = 4, sigma: float = 2.0, rel_thresh: float = 0.01) -> list[CornerPoint]:
    """Harris corners of the binary occupancy image (Unknown counted as Occupied).

    ``response_thresh`` defaults to ``rel_thresh`` times the maximum response;
    only strictly positive responses can ever qualify.
    """
    image = (grid.cells != CellState.FREE).astype(float)
    R = harris_response(image, sigma, k_harris)
    top = float(R.max())
    if top <= 0:
        return []
    thresh = rel_thresh * top if response_thresh is None else float(response_thresh)
    thresh = max(thresh, 0.0)
    local_max = R == ndimage.maximum_filter(R, footprint=_disk(nms_radius), mode="constant", cval=-np.inf)
    cand = np.argwhere(local_max & (R > thresh))
    # plateaus can yield adjacent equal maxima; keep the first in raster order
    corners: list[CornerPoint] = []
    taken = np.zeros(R.shape, dtype=bool)
    fp = _disk(nms_radius)
    r = int(nms_radius)
    for iy, ix in sorted(map(tuple, cand), key=lambda c: (-R[c], c)):
        if taken[iy, ix]:
            continue
        y0, y1 = max(iy - r, 0), min(iy + r + 1, R.shape[0])
        x0, x1 = max(ix - r, 0), min(ix + r + 1, R.shape[1])
        taken[y0:y1, x0:x1] |= fp[y0 - iy + r:y1 - iy + r, x0 - ix + r:x1 - ix + r]
        x, y = grid.grid_to_world(ix, iy)
        corners.append(CornerPoint(WorldPoint(x, y), float(R[iy, ix]), (int(iy), int(ix))))
    corners.sort(key=lambda c: c.cell)
    return corners


# --------------------------------------------------------------------------
# Clustering
# --------------------------------------------------------------------------

@dataclass
class Clusters:
    labels: np.ndarray  # cluster index per corner
    centroids: np.ndarray  # (k, 2)

    @property
    def members(self) -> list[np.ndarray]:
        return [np.nonzero(self.labels == j)[0] for j in range(len(self.centroids))]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.centroids))


def farthest_point_init(points: np.ndarray, k: int) -> np.ndarray:
    """First center is point 0; each next one is the point farthest from all chosen centers."""
    centers = [0]
    d = np.hypot(*(points - points[0]).T)
    while len(centers) < min(k, len(points)):
        nxt = int(np.argmax(d))
        if d[nxt] <= 0:
            break
        centers.append(nxt)
        d = np.minimum(d, np.hypot(*(points - points[nxt]).T))
    return points[centers].astype(float)


def kmeans(points: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> Clusters:
    """Lloyd iterations from the given centers; clusters that empty out are dropped."""
    centers = np.array(centers, dtype=float)
    labels = np.full(len(points), -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        keep = np.unique(new)
        if len(keep) < len(centers):
            centers = centers[keep]
            new = np.searchsorted(keep, new)
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([points[labels == j].mean(axis=0) for j in range(len(centers))])
    return Clusters(labels, centers)


def cluster_corners(corners, k_init: int | None = None, split_distance: float = 3.0) -> Clusters:
    """K-means, then split: the corner farthest beyond ``split_distance`` from its
    centroid seeds a new cluster and K-means reruns, until no corner is that far."""
    pts = np.array([[c.position.x, c.position.y] if isinstance(c, CornerPoint) else c for c in corners],
                   dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise RecoveryError("cannot cluster zero corners")
    if k_init is None:
        k_init = max(2, len(pts) // 15)
    cl = kmeans(pts, farthest_point_init(pts, k_init))
    while True:
        far = np.hypot(*(pts - cl.centroids[cl.labels]).T)
        worst = int(np.argmax(far))
        if far[worst] <= split_distance:
            return cl
        cl = kmeans(pts, np.vstack([cl.centroids, pts[worst]]))


# --------------------------------------------------------------------------
# Offsetting and weights
# --------------------------------------------------------------------------

_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def offset_to_passage(centroid: WorldPoint, grid: OccupancyGrid, clearance_field: np.ndarray,
                      min_clearance: float, cluster_id: int | None = None) -> WorldPoint:
    """Climb the clearance field from the centroid's cell until clearance >= ``min_clearance``.

    If the climb stalls on a ridge below ``min_clearance``, the nearest cell
    (from the stall point) that does satisfy it is returned instead.
    """
    ix, iy = grid.world_to_grid(centroid.x, centroid.y)
    ix = min(max(ix, 0), grid.width - 1)
    iy = min(max(iy, 0), grid.height - 1)
    inside = grid.in_bounds(*grid.world_to_grid(centroid.x, centroid.y))
    if inside and not grid.blocked[iy, ix] and clearance_field[iy, ix] >= min_clearance:
        return centroid
    c = clearance_field
    free = ~grid.blocked
    while c[iy, ix] < min_clearance or grid.blocked[iy, ix]:
        best, by, bx = 0.0, -1, -1
        for dy, dx in _STEPS:
            ny, nx = iy + dy, ix + dx
            if 0 <= ny < grid.height and 0 <= nx < grid.width:
                slope = (c[ny, nx] - c[iy, ix]) / math.hypot(dy, dx)
                if slope > best:
                    best, by, bx = slope, ny, nx
        if by < 0:
            break
        iy, ix = by, bx
    if c[iy, ix] < min_clearance or grid.blocked[iy, ix]:
        ok = np.argwhere(free & (c >= min_clearance))
        if len(ok) == 0:
            raise RecoveryError(f"cluster {cluster_id}: no free cell with clearance >= {min_clearance} m")
        k = int(np.argmin((ok[:, 0] - iy) ** 2 + (ok[:, 1] - ix) ** 2))
        iy, ix = ok[k]
    x, y = grid.grid_to_world(ix, iy)
    return WorldPoint(x, y)


def compute_weights(cluster_sizes) -> np.ndarray:
    """Preference weight per cluster: its corner count over the total corner count."""
    sizes = np.asarray(cluster_sizes, dtype=float)
    if sizes.size == 0 or sizes.sum() <= 0:
        raise RecoveryError("all clusters are empty")
    return normalize_exact(sizes)


_QUANTUM = 2 ** 52


def normalize_exact(values) -> np.ndarray:
    """``values / values.sum()`` snapped to multiples of 2**-52 so the result sums to
    exactly 1.0 in any summation order (every partial sum is representable).

    Equal inputs always get equal outputs. The rounding remainder is spread over
    groups of equal values as an integer combination of group sizes; when no such
    combination exists (every value repeats, e.g. ten equal entries) the plain
    ratio is returned instead.
    """
    v = np.asarray(values, dtype=float)
    p = v / v.sum()
    m = np.round(p * _QUANTUM).astype(np.int64)
    r = _QUANTUM - int(m.sum())
    if r == 0:
        return m / _QUANTUM
    _, inv, counts = np.unique(v, return_inverse=True, return_counts=True)
    delta = _split_remainder(counts, r)
    if delta is None:
        return p
    return (m + delta[inv]) / _QUANTUM


def _split_remainder(counts: np.ndarray, r: int) -> np.ndarray | None:
    """Integers d with sum(counts * d) == r, preferring the largest singleton group."""
    d = np.zeros(len(counts), dtype=np.int64)
    single = np.nonzero(counts == 1)[0]
    if len(single):
        d[single[-1]] = r
        return d
    g, coef = int(counts[0]), [1] + [0] * (len(counts) - 1)
    for i in range(1, len(counts)):
        g, a, b = _egcd(g, int(counts[i]))
        coef = [c * a for c in coef]
        coef[i] = b
    if r % g:
        return None
    return np.array(coef, dtype=np.int64) * (r // g)


def _egcd(a: int, b: int) -> tuple[int, int, int]:
    if b == 0:
        return a, 1, 0
    g, x, y = _egcd(b, a % b)
    return g, y, x - (a // b) * y


def extract_recovery_points(grid: OccupancyGrid, robot_radius: float = 0.17, margin: float = 0.3,
                            harris: HarrisParams | None = None, k_init: int | None = None,
                            split_distance: float = 3.0) -> tuple[list[RecoveryPoint], list[CornerPoint]]:
    """Full offline pipeline: corners -> clusters -> passage offsets -> weights."""
    hp = harris or HarrisParams()
    corners = detect_corners(grid, hp.k, None, hp.nms_radius, hp.sigma, hp.rel_thresh)
    if not corners:
        raise RecoveryError("no corners detected in map")
    cl = cluster_corners(corners, k_init, split_distance)
    clear = grid.clearance()
    min_clear = robot_radius + margin
    kept, sizes = [], []
    for j, (cx, cy) in enumerate(cl.centroids):
        try:
            p = offset_to_passage(WorldPoint(float(cx), float(cy)), grid, clear, min_clear, cluster_id=j)
        except RecoveryError as exc:
            log.warning("dropping cluster: %s", exc)
            continue
        kept.append(p)
        sizes.append(int(cl.sizes[j]))
    if not kept:
        raise RecoveryError("no cluster could be offset into free space")
    weights = compute_weights(sizes)
    points = [RecoveryPoint(p, float(w), n, j) for j, (p, w, n) in enumerate(zip(kept, weights, sizes))]
    return points, corners


# --------------------------------------------------------------------------
# Online scoring
# --------------------------------------------------------------------------

def score_distance(points, goal) -> np.ndarray:
    """Negative goal distances normalized by their sum (sums to -1)."""
    pts = np.array([[p.x, p.y] if isinstance(p, WorldPoint) else p for p in points], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise RecoveryError("no recovery points to score")
    g = goal.as_array() if isinstance(goal, WorldPoint) else np.asarray(goal, dtype=float)
    d = np.hypot(*(pts - g).T)
    total = d.sum()
    if total <= 0:
        raise RecoveryError("every recovery point coincides with the goal")
    return -normalize_exact(d)


def score_accessibility(net, scan_stack, vel, points, pose_estimate) -> np.ndarray:
    """Critic value of each point used as the goal from the estimated pose."""
    from .policy.network import values_of_goals
    pose = np.asarray(getattr(pose_estimate, "mean", pose_estimate) if not isinstance(pose_estimate, np.ndarray)
                      else pose_estimate, dtype=float)
    pts = [(p.x, p.y) if isinstance(p, WorldPoint) else tuple(p) for p in points]
    return values_of_goals(net, scan_stack, vel, pts, pose)


def fused_scores(v_rl, v_cp, v_d, weights=DEFAULT_WEIGHTS) -> np.ndarray:
    w_rl, w_cp, w_d = weights
    return w_rl * np.asarray(v_rl, float) + w_cp * np.asarray(v_cp, float) + w_d * np.asarray(v_d, float)


def select_recovery_point(scores, weights=DEFAULT_WEIGHTS, current_selection: int | None = None,
                          switch_margin: float = 0.0) -> int:
    """Argmax of the fused score (lowest index on ties) with switching hysteresis.

    ``scores`` is a sequence of ``(v_rl, v_cp, v_d)`` triples or an (n, 3) array.
    """
    s = np.asarray(scores, dtype=float).reshape(-1, 3)
    if len(s) == 0:
        raise RecoveryError("empty recovery candidate list")
    fused = fused_scores(s[:, 0], s[:, 1], s[:, 2], weights)
    best = int(np.argmax(fused))
    if current_selection is not None and 0 <= current_selection < len(s):
        if not fused[best] > fused[current_selection] + switch_margin:
            return int(current_selection)
    return best


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

RP_HEADER = ("cluster_id", "x", "y", "cluster_size", "weight")


def format_recovery_points(points: list[RecoveryPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RP_HEADER)
    for p in points:
        w.writerow([p.cluster_id, f"{p.position.x:.4f}", f"{p.position.y:.4f}", p.cluster_size,
                    repr(float(p.weight))])
    return buf.getvalue()


def write_recovery_points(path: str | os.PathLike, points: list[RecoveryPoint]) -> None:
    Path(path).write_text(format_recovery_points(points), encoding="utf-8")


def read_recovery_points(path: str | os.PathLike) -> list[RecoveryPoint]:
    path = Path(path)
    if not path.exists():
        raise RecoveryError(f"recovery-point file not found: {path}")
    rows = list(csv.DictReader(path.read_text(encoding="utf-8").splitlines()))
    if rows and tuple(rows[0].keys()) != RP_HEADER:
        raise RecoveryError(f"{path}: expected header {','.join(RP_HEADER)}")
    try:
        pts = [RecoveryPoint(WorldPoint(float(r["x"]), float(r["y"])), float(r["weight"]),
                             int(r["cluster_size"]), int(r["cluster_id"])) for r in rows]
    except (TypeError, ValueError) as exc:
        raise RecoveryError(f"{path}: malformed record ({exc})") from exc
    if not pts:
        raise RecoveryError(f"{path}: no recovery points")
    return pts


def write_overlay(path: str | os.PathLike, grid: OccupancyGrid, points: list[RecoveryPoint],
                  corners: list[CornerPoint] = ()) -> None:
    """Binary PPM: map in gray, corners in blue, recovery points as red-to-yellow disks by weight."""
    img = np.empty(grid.cells.shape + (3,), dtype=np.uint8)
    img[grid.cells == CellState.FREE] = (255, 255, 255)
    img[grid.cells == CellState.OCCUPIED] = (0, 0, 0)
    img[grid.cells == CellState.UNKNOWN] = (160, 160, 160)
    for c in corners:
        img[c.cell] = (40, 80, 255)
    wmax = max((p.weight for p in points), default=1.0)
    r = max(2, int(round(0.25 / grid.resolution)))
    disk = _disk(r)
    for p in points:
        ix, iy = grid.world_to_grid(p.position.x, p.position.y)
        color = (255, int(220 * p.weight / wmax), 0)
        for dy, dx in np.argwhere(disk) - r:
            y, x = iy + dy, ix + dx
            if 0 <= y < grid.height and 0 <= x < grid.width:
                img[y, x] = color
    img = img[::-1]
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
