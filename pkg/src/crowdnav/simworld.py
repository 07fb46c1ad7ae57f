"""Deterministic 2D world: unicycle robot, social-force crowd, LiDAR, drifting odometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .gridmap import OccupancyGrid
from .raycast import cast_fan, circle_ranges

N_BEAMS = 360
MAX_RANGE = 6.0
BEAM_ANGLES = np.deg2rad(np.arange(N_BEAMS, dtype=float))


@dataclass
class SimParams:
    dt: float = 0.1
    v_max: float = 1.0
    w_max: float = math.pi / 2
    robot_radius: float = 0.17
    scan_sigma: float = 0.05
    max_range: float = MAX_RANGE
    odom_alpha: tuple[float, float, float, float] = (0.05, 0.01, 0.05, 0.01)
    # social force
    tau: float = 0.5
    repulsion_a: float = 2.0
    repulsion_b: float = 0.35
    capture_radius: float = 0.5
    max_speed_factor: float = 1.3


@dataclass
class RobotState:
    x: float
    y: float
    heading: float
    v: float = 0.0
    w: float = 0.0
    radius: float = 0.17

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass
class Pedestrian:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = 0.3
    preferred_speed: float = 1.0
    route: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    loop: bool = True
    target: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.route = np.atleast_2d(np.asarray(self.route, dtype=float))
        if self.radius <= 0 or self.preferred_speed < 0:
            raise ValueError("pedestrian radius must be > 0 and preferred_speed >= 0")


class Crowd:
    """Struct-of-arrays container for all pedestrians of one world."""

    def __init__(self, peds: list[Pedestrian] | None = None):
        peds = peds or []
        self.pos = np.array([p.position for p in peds], dtype=float).reshape(-1, 2)
        self.vel = np.array([p.velocity for p in peds], dtype=float).reshape(-1, 2)
        self.radius = np.array([p.radius for p in peds], dtype=float)
        self.pref = np.array([p.preferred_speed for p in peds], dtype=float)
        self.routes = [p.route for p in peds]
        self.loop = np.array([p.loop for p in peds], dtype=bool)
        self.target = np.array([p.target for p in peds], dtype=np.int64)

    def __len__(self):
        return len(self.pref)

    def targets(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 2))
        return np.array([r[t] for r, t in zip(self.routes, self.target)])

    def pedestrian(self, i: int) -> Pedestrian:
        return Pedestrian(self.pos[i].copy(), self.vel[i].copy(), float(self.radius[i]),
                          float(self.pref[i]), self.routes[i], bool(self.loop[i]), int(self.target[i]))

    def copy(self) -> "Crowd":
        c = Crowd()
        c.pos, c.vel, c.radius, c.pref = self.pos.copy(), self.vel.copy(), self.radius.copy(), self.pref.copy()
        c.routes, c.loop, c.target = list(self.routes), self.loop.copy(), self.target.copy()
        return c


@dataclass
class LaserScan:
    ranges: np.ndarray
    timestamp: float = 0.0
    max_range: float = MAX_RANGE
    angle_increment: float = math.radians(1.0)


class CollisionKind(str, Enum):
    NONE = "none"
    PEDESTRIAN = "pedestrian"
    STATIC = "static"


@dataclass
class WorldState:
    grid: OccupancyGrid
    robot: RobotState
    crowd: Crowd
    rng: np.random.Generator
    params: SimParams = field(default_factory=SimParams)
    clock: float = 0.0
    odom_pose: np.ndarray | None = None
    forward_speed: float = 0.0
    last_collision: CollisionKind = CollisionKind.NONE
    respawned: np.ndarray | None = None

    def __post_init__(self):
        if self.odom_pose is None:
            self.odom_pose = self.robot.pose.copy()

    # thin method aliases for the module-level operations
    def step(self, cmd, dt: float | None = None) -> "WorldState":
        return step(self, cmd, self.params.dt if dt is None else dt)

    def cast_scan(self, pose=None, noise_sigma: float | None = None) -> LaserScan:
        return cast_scan(self, self.robot.pose if pose is None else pose,
                         self.params.scan_sigma if noise_sigma is None else noise_sigma)

    def read_odometry(self) -> np.ndarray:
        return read_odometry(self)

    def check_collision(self) -> CollisionKind:
        return check_collision(self)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def integrate_arc(x, y, th, dtrans, drot):
    """Exact unicycle update for a translation ``dtrans`` along an arc turning by ``drot``."""
    if abs(drot) < 1e-9:
        return x + dtrans * math.cos(th), y + dtrans * math.sin(th), th + drot
    r = dtrans / drot
    return (x + r * (math.sin(th + drot) - math.sin(th)),
            y + r * (math.cos(th) - math.cos(th + drot)),
            th + drot)


def _in_static_collision(grid: OccupancyGrid, x: float, y: float, radius: float) -> bool:
    res = grid.resolution
    ox, oy = grid.origin
    ix0, iy0 = grid.world_to_grid(x - radius, y - radius)
    ix1, iy1 = grid.world_to_grid(x + radius, y + radius)
    for iy in range(iy0, iy1 + 1):
        for ix in range(ix0, ix1 + 1):
            if 0 <= ix < grid.width and 0 <= iy < grid.height and not grid.blocked[iy, ix]:
                continue
            # nearest point of the cell square to the center (out-of-map cells count as walls)
            cx0, cy0 = ox + ix * res, oy + iy * res
            nx = min(max(x, cx0), cx0 + res)
            ny = min(max(y, cy0), cy0 + res)
            if (nx - x) ** 2 + (ny - y) ** 2 < radius * radius:
                return True
    return False


def check_collision(world: WorldState) -> CollisionKind:
    r = world.robot
    if len(world.crowd):
        d = np.hypot(world.crowd.pos[:, 0] - r.x, world.crowd.pos[:, 1] - r.y)
        if np.any(d < r.radius + world.crowd.radius):
            return CollisionKind.PEDESTRIAN
    if _in_static_collision(world.grid, r.x, r.y, r.radius):
        return CollisionKind.STATIC
    return CollisionKind.NONE


# --------------------------------------------------------------------------
# Social force crowd
# --------------------------------------------------------------------------

def _obstacle_repulsion(grid: OccupancyGrid, pos, radius, p: SimParams):
    vecs = grid.nearest_obstacle_vectors()
    out = np.zeros_like(pos)
    if np.isnan(vecs).all() or len(pos) == 0:
        return out
    ix, iy = grid.world_to_grid(pos[:, 0], pos[:, 1])
    ix = np.clip(ix, 0, grid.width - 1)
    iy = np.clip(iy, 0, grid.height - 1)
    cx, cy = grid.grid_to_world(ix, iy)
    wall = np.column_stack([cx, cy]) + vecs[iy, ix]
    diff = pos - wall
    d = np.hypot(diff[:, 0], diff[:, 1])
    ok = d > 1e-9
    surface = np.maximum(d - 0.5 * grid.resolution, 0.0)
    mag = p.repulsion_a * np.exp((radius - surface) / p.repulsion_b)
    out[ok] = (mag[ok] / d[ok])[:, None] * diff[ok]
    return out


def social_force_accel(pos, vel, radius, pref, targets, nb_pos, nb_radius, grid, p: SimParams,
                       self_index=None):
    """Accelerations for agents at ``pos`` given neighbor bodies ``nb_pos``.

    ``self_index[i]`` is the row of agent i inside ``nb_pos`` (excluded), or -1.
    """
    to_goal = targets - pos
    dist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    e = np.zeros_like(to_goal)
    moving = dist > 1e-9
    e[moving] = to_goal[moving] / dist[moving, None]
    acc = (pref[:, None] * e - vel) / p.tau
    if len(nb_pos):
        diff = pos[:, None, :] - nb_pos[None, :, :]
        d = np.hypot(diff[..., 0], diff[..., 1])
        valid = d > 1e-9
        if self_index is not None:
            rows = np.nonzero(self_index >= 0)[0]
            valid[rows, self_index[rows]] = False
        safe_d = np.where(valid, d, 1.0)
        mag = np.where(valid, p.repulsion_a * np.exp((radius[:, None] + nb_radius[None, :] - safe_d)
                                                     / p.repulsion_b), 0.0)
        acc += ((mag / safe_d)[..., None] * diff).sum(axis=1)
    acc += _obstacle_repulsion(grid, pos, radius, p)
    return acc


def _advance_routes(crowd: Crowd, p: SimParams) -> np.ndarray:
    respawned = np.zeros(len(crowd), dtype=bool)
    if len(crowd) == 0:
        return respawned
    tg = crowd.targets()
    close = np.hypot(*(tg - crowd.pos).T) < p.capture_radius
    for i in np.nonzero(close)[0]:
        n = len(crowd.routes[i])
        if crowd.target[i] + 1 < n:
            crowd.target[i] += 1
        elif crowd.loop[i]:
            crowd.target[i] = 0
        else:
            crowd.pos[i] = crowd.routes[i][0]
            crowd.vel[i] = 0.0
            crowd.target[i] = min(1, n - 1)
            respawned[i] = True
    return respawned


def _clamp_speed(vel, pref, factor):
    speed = np.hypot(vel[:, 0], vel[:, 1])
    cap = factor * pref
    over = speed > cap
    vel[over] *= (cap[over] / speed[over])[:, None]
    return vel


def social_force_step(ped: Pedestrian, neighbors, grid: OccupancyGrid, dt: float,
                      params: SimParams | None = None) -> Pedestrian:
    """Advance one pedestrian by one semi-implicit Euler step.

    ``neighbors`` is an iterable of ``(position, radius)`` bodies (other
    pedestrians and the robot).
    """
    p = params or SimParams()
    nb = list(neighbors)
    nb_pos = np.array([n[0] for n in nb], dtype=float).reshape(-1, 2)
    nb_rad = np.array([n[1] for n in nb], dtype=float)
    crowd = Crowd([ped])
    acc = social_force_accel(crowd.pos, crowd.vel, crowd.radius, crowd.pref, crowd.targets(),
                             nb_pos, nb_rad, grid, p)
    crowd.vel = _clamp_speed(crowd.vel + acc * dt, crowd.pref, p.max_speed_factor)
    crowd.pos = crowd.pos + crowd.vel * dt
    _advance_routes(crowd, p)
    return crowd.pedestrian(0)


def _separate(world: WorldState) -> None:
    c, r, grid = world.crowd, world.robot, world.grid
    n = len(c)
    if n == 0:
        return
    corr = np.zeros_like(c.pos)
    diff = c.pos[:, None, :] - c.pos[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(d, np.inf)
    overlap = c.radius[:, None] + c.radius[None, :] - d
    ii, jj = np.nonzero((overlap > 0) & np.isfinite(d))
    for i, j in zip(ii, jj):
        if d[i, j] > 1e-9:
            corr[i] += 0.5 * overlap[i, j] * diff[i, j] / d[i, j]
    rd = c.pos - np.array([r.x, r.y])
    rdist = np.hypot(rd[:, 0], rd[:, 1])
    rov = r.radius + c.radius - rdist
    hit = (rov > 0) & (rdist > 1e-9)
    corr[hit] += (rov[hit] / rdist[hit])[:, None] * rd[hit]
    norm = np.hypot(corr[:, 0], corr[:, 1])
    big = norm > c.radius
    corr[big] *= (c.radius[big] / norm[big])[:, None]
    c.pos += corr
    # walls: push out along the nearest-obstacle normal
    vecs = grid.nearest_obstacle_vectors()
    if not np.isnan(vecs).all():
        ix, iy = grid.world_to_grid(c.pos[:, 0], c.pos[:, 1])
        inside = grid.in_bounds(ix, iy)
        ix, iy = np.clip(ix, 0, grid.width - 1), np.clip(iy, 0, grid.height - 1)
        cx, cy = grid.grid_to_world(ix, iy)
        wall = np.column_stack([cx, cy]) + vecs[iy, ix]
        dv = c.pos - wall
        dd = np.hypot(dv[:, 0], dv[:, 1])
        pen = c.radius + 0.5 * grid.resolution - dd
        push = inside & (pen > 0) & (dd > 1e-9)
        pen = np.minimum(pen, c.radius)
        c.pos[push] += (pen[push] / dd[push])[:, None] * dv[push]


# --------------------------------------------------------------------------
# World step
# --------------------------------------------------------------------------

def step(world: WorldState, cmd, dt: float) -> WorldState:
    """Advance robot, crowd, clock and odometry by ``dt``; mutates and returns ``world``."""
    v, w = float(cmd[0]), float(cmd[1])
    if not (math.isfinite(v) and math.isfinite(w)):
        raise ValueError(f"non-finite velocity command {cmd!r}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = world.params
    v = min(max(v, 0.0), p.v_max)
    w = min(max(w, -p.w_max), p.w_max)
    r = world.robot
    r.v, r.w = v, w

    nx, ny, nth = integrate_arc(r.x, r.y, r.heading, v * dt, w * dt)
    static_hit = _in_static_collision(world.grid, nx, ny, r.radius)
    if static_hit:
        nx, ny = r.x, r.y
    world.forward_speed = ((nx - r.x) * math.cos(r.heading + 0.5 * w * dt)
                           + (ny - r.y) * math.sin(r.heading + 0.5 * w * dt)) / dt
    r.x, r.y, r.heading = nx, ny, float(wrap_angle(nth))

    c = world.crowd
    if len(c):
        nb_pos = np.vstack([c.pos, [[r.x, r.y]]])
        nb_rad = np.append(c.radius, r.radius)
        acc = social_force_accel(c.pos, c.vel, c.radius, c.pref, c.targets(), nb_pos, nb_rad,
                                 world.grid, p, self_index=np.arange(len(c)))
        c.vel = _clamp_speed(c.vel + acc * dt, c.pref, p.max_speed_factor)
        c.pos = c.pos + c.vel * dt
        world.respawned = _advance_routes(c, p)
    pre = check_collision(world)
    world.last_collision = CollisionKind.STATIC if static_hit else pre
    _separate(world)

    # odometry integrates the commanded motion with multiplicative noise
    a1, a2, a3, a4 = p.odom_alpha
    dtr, drot = v * dt, w * dt
    ntr = dtr + world.rng.normal(0.0, a1 * abs(dtr) + a2 * abs(drot))
    nrot = drot + world.rng.normal(0.0, a3 * abs(drot) + a4 * abs(dtr))
    ox, oy, oth = integrate_arc(*world.odom_pose, ntr, nrot)
    world.odom_pose = np.array([ox, oy, float(wrap_angle(oth))])
    world.clock += dt
    return world


def read_odometry(world: WorldState) -> np.ndarray:
    return world.odom_pose.copy()


def cast_scan(world: WorldState, pose, noise_sigma: float) -> LaserScan:
    """360 one-degree beams from ``pose`` against walls and pedestrian circles."""
    g, p = world.grid, world.params
    x, y, th = float(pose[0]), float(pose[1]), float(pose[2])
    ranges = cast_fan(g.blocked, g.resolution, g.origin[0], g.origin[1], x, y, th, BEAM_ANGLES, p.max_range)
    c = world.crowd
    if len(c):
        circle_ranges(x, y, th, BEAM_ANGLES, c.pos[:, 0].copy(), c.pos[:, 1].copy(), c.radius, ranges,
                      p.max_range)
    if noise_sigma > 0:
        ranges = ranges + world.rng.normal(0.0, noise_sigma, size=ranges.shape)
    np.clip(ranges, 0.0, p.max_range, out=ranges)
    return LaserScan(ranges, timestamp=world.clock, max_range=p.max_range)
