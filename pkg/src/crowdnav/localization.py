"""Monte-Carlo localization against the static occupancy grid.

The beam model raycasts the static map only, so pedestrians that occlude
walls show up as unexplained short returns.  Dense crowds therefore flatten
the likelihood and inflate the positional covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridmap import OccupancyGrid
from .raycast import cast_particles
from .simworld import BEAM_ANGLES, MAX_RANGE, LaserScan, wrap_angle


class LocalizationError(ValueError):
    pass


@dataclass
class MCLConfig:
    n_particles: int = 500
    beam_step: int = 10
    z_hit: float = 0.8
    z_rand: float = 0.15
    z_max: float = 0.05
    sigma_hit: float = 0.1
    max_range: float = MAX_RANGE
    # motion noise of the filter (same form as the simulated odometry drift)
    alpha: tuple[float, float, float, float] = (0.05, 0.01, 0.05, 0.01)
    init_spread: float = 0.1
    reinject_fraction: float = 0.05


@dataclass
class ParticleBelief:
    poses: np.ndarray  # (N, 3) x, y, heading
    weights: np.ndarray  # (N,)
    underflow: bool = False

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.weights) != len(self.poses):
            raise ValueError("poses/weights length mismatch")

    @property
    def count(self) -> int:
        return len(self.weights)

    def copy(self) -> "ParticleBelief":
        return ParticleBelief(self.poses.copy(), self.weights.copy(), self.underflow)


@dataclass
class PoseEstimate:
    mean: np.ndarray
    positional_covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    @property
    def uncertainty(self) -> float:
        return float(np.trace(self.positional_covariance))

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]


def relative_motion(prev_pose, pose) -> np.ndarray:
    """(dx, dy, dtheta) of ``pose`` expressed in the frame of ``prev_pose``."""
    dx, dy = pose[0] - prev_pose[0], pose[1] - prev_pose[1]
    c, s = math.cos(prev_pose[2]), math.sin(prev_pose[2])
    return np.array([c * dx + s * dy, -s * dx + c * dy, float(wrap_angle(pose[2] - prev_pose[2]))])


def compose(pose, delta) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    return np.array([pose[0] + c * delta[0] - s * delta[1],
                     pose[1] + s * delta[0] + c * delta[1],
                     float(wrap_angle(pose[2] + delta[2]))])


def predict(belief: ParticleBelief, odom_delta, noise, rng: np.random.Generator) -> ParticleBelief:
    """Move every particle by the relative odometry motion with per-particle noise."""
    dx, dy, dth = (float(v) for v in odom_delta)
    if not all(math.isfinite(v) for v in (dx, dy, dth)):
        raise LocalizationError("non-finite odometry delta")
    a1, a2, a3, a4 = noise
    n = belief.count
    dtrans = math.hypot(dx, dy)
    ux, uy = (dx / dtrans, dy / dtrans) if dtrans > 1e-12 else (1.0, 0.0)
    ntrans = dtrans + rng.normal(0.0, a1 * dtrans + a2 * abs(dth), n)
    nrot = dth + rng.normal(0.0, a3 * abs(dth) + a4 * dtrans, n)
    th = belief.poses[:, 2]
    lx, ly = ntrans * ux, ntrans * uy
    c, s = np.cos(th), np.sin(th)
    poses = belief.poses.copy()
    poses[:, 0] += c * lx - s * ly
    poses[:, 1] += s * lx + c * ly
    poses[:, 2] = wrap_angle(th + nrot)
    return ParticleBelief(poses, belief.weights.copy(), belief.underflow)


def beam_log_likelihood(measured: np.ndarray, expected: np.ndarray, cfg: MCLConfig) -> np.ndarray:
    """Sum over beams of log p(z | x) for each row of ``expected`` (n_particles, n_beams)."""
    norm = 1.0 / (cfg.sigma_hit * math.sqrt(2 * math.pi))
    p = cfg.z_hit * norm * np.exp(-0.5 * ((measured[None, :] - expected) / cfg.sigma_hit) ** 2)
    p += cfg.z_rand / cfg.max_range
    p += cfg.z_max * (measured >= cfg.max_range - 1e-9)[None, :]
    return np.log(p).sum(axis=1)


def expected_ranges(poses: np.ndarray, grid: OccupancyGrid, beam_idx: np.ndarray, max_range: float):
    return cast_particles(grid.blocked, grid.resolution, grid.origin[0], grid.origin[1],
                          np.ascontiguousarray(poses[:, 0]), np.ascontiguousarray(poses[:, 1]),
                          np.ascontiguousarray(poses[:, 2]), BEAM_ANGLES[beam_idx], max_range)


def update(belief: ParticleBelief, scan: LaserScan | np.ndarray, grid: OccupancyGrid,
           cfg: MCLConfig | None = None) -> ParticleBelief:
    """Multiply weights by the decimated beam likelihood and renormalize."""
    cfg = cfg or MCLConfig()
    ranges = scan.ranges if isinstance(scan, LaserScan) else np.asarray(scan, dtype=float)
    idx = np.arange(0, len(ranges), cfg.beam_step)
    expected = expected_ranges(belief.poses, grid, idx, cfg.max_range)
    loglik = beam_log_likelihood(ranges[idx], expected, cfg)
    with np.errstate(divide="ignore"):
        logw = np.log(belief.weights) + loglik
    top = logw.max()
    # underflow: the plain product would be zero (or nan) for every particle
    if not np.isfinite(top) or top < math.log(np.finfo(float).tiny):
        n = belief.count
        return ParticleBelief(belief.poses.copy(), np.full(n, 1.0 / n), underflow=True)
    w = np.exp(logw - top)
    w /= w.sum()
    return ParticleBelief(belief.poses.copy(), w, underflow=False)


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(weights ** 2))


def systematic_resample(weights: np.ndarray, n_out: int, rng: np.random.Generator,
                        offset: float | None = None) -> np.ndarray:
    """Indices drawn by low-variance resampling; ``offset`` in [0, 1) pins the comb."""
    u = rng.uniform() if offset is None else offset
    positions = (u + np.arange(n_out)) / n_out
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def sample_free_poses(grid: OccupancyGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    centers = grid.free_cell_centers()
    if len(centers) == 0:
        raise LocalizationError("map has no free cell")
    pick = centers[rng.integers(len(centers), size=n)]
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * grid.resolution
    return np.column_stack([pick + jitter, rng.uniform(-np.pi, np.pi, n)])


def resample(belief: ParticleBelief, rng: np.random.Generator, grid: OccupancyGrid | None = None,
             reinject_fraction: float = 0.05) -> ParticleBelief:
    """Systematic resampling gated on ESS < N/2; reinjects uniform particles after underflow."""
    n = belief.count
    if belief.underflow and grid is not None:
        k = max(1, int(round(reinject_fraction * n)))
        poses = belief.poses.copy()
        slots = rng.choice(n, size=k, replace=False)
        poses[slots] = sample_free_poses(grid, k, rng)
        return ParticleBelief(poses, np.full(n, 1.0 / n), underflow=False)
    if effective_sample_size(belief.weights) >= n / 2:
        return belief
    idx = systematic_resample(belief.weights, n, rng)
    return ParticleBelief(belief.poses[idx].copy(), np.full(n, 1.0 / n), underflow=False)


def estimate(belief: ParticleBelief) -> PoseEstimate:
    w = belief.weights / belief.weights.sum()
    xy = belief.poses[:, :2]
    mu = w @ xy
    th = math.atan2(float(w @ np.sin(belief.poses[:, 2])), float(w @ np.cos(belief.poses[:, 2])))
    d = xy - mu
    cov = (d * w[:, None]).T @ d
    cov = 0.5 * (cov + cov.T)
    return PoseEstimate(np.array([mu[0], mu[1], th]), cov)


def reseed(belief: ParticleBelief, pose, spread: float, grid: OccupancyGrid,
           rng: np.random.Generator) -> ParticleBelief:
    """Redraw all particles around ``pose``; draws landing outside free space are redrawn."""
    if not spread > 0:
        raise LocalizationError("reseed spread must be positive")
    if not grid.is_free_world(pose[0], pose[1]):
        raise LocalizationError(f"reseed pose ({pose[0]:.2f}, {pose[1]:.2f}) is outside free space")
    n = belief.count
    poses = np.empty((n, 3))
    todo = np.arange(n)
    for _ in range(20):
        cand = np.column_stack([rng.normal(pose[0], spread, len(todo)),
                                rng.normal(pose[1], spread, len(todo)),
                                wrap_angle(rng.normal(pose[2], spread, len(todo)))])
        ix, iy = grid.world_to_grid(cand[:, 0], cand[:, 1])
        ok = grid.in_bounds(ix, iy)
        ok[ok] = ~grid.blocked[iy[ok], ix[ok]]
        poses[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if len(todo) == 0:
            break
    if len(todo):
        poses[todo] = [pose[0], pose[1], pose[2]]
    return ParticleBelief(poses, np.full(n, 1.0 / n))


def init_belief(pose, spread: float, grid: OccupancyGrid, rng: np.random.Generator,
                n: int = 500) -> ParticleBelief:
    empty = ParticleBelief(np.zeros((n, 3)), np.full(n, 1.0 / n))
    return reseed(empty, pose, spread, grid, rng)


class MonteCarloLocalizer:
    """predict -> update -> resample loop driven by successive odometry readings."""

    def __init__(self, grid: OccupancyGrid, cfg: MCLConfig, rng: np.random.Generator):
        self.grid = grid
        self.cfg = cfg
        self.rng = rng
        self.belief: ParticleBelief | None = None
        self._last_odom: np.ndarray | None = None
        self.underflows = 0

    def initialize(self, pose, odom_pose, spread: float | None = None) -> None:
        spread = self.cfg.init_spread if spread is None else spread
        self.belief = init_belief(pose, spread, self.grid, self.rng, self.cfg.n_particles)
        self._last_odom = np.asarray(odom_pose, dtype=float).copy()

    def reseed(self, pose, spread: float) -> None:
        self.belief = reseed(self.belief, pose, spread, self.grid, self.rng)

    def step(self, odom_pose, scan: LaserScan) -> PoseEstimate:
        odom_pose = np.asarray(odom_pose, dtype=float)
        delta = relative_motion(self._last_odom, odom_pose)
        self._last_odom = odom_pose.copy()
        b = predict(self.belief, delta, self.cfg.alpha, self.rng)
        b = update(b, scan, self.grid, self.cfg)
        if b.underflow:
            self.underflows += 1
        est = estimate(b)
        self.belief = resample(b, self.rng, self.grid, self.cfg.reinject_fraction)
        return est

    def estimate(self) -> PoseEstimate:
        return estimate(self.belief)
