"""Goal-reaching training environment and the shaped reward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..gridmap import CellState, OccupancyGrid
from ..simworld import CollisionKind, Crowd, Pedestrian, RobotState, SimParams, WorldState
from .network import Observation, ScanStack, make_observation

ARRIVAL_REWARD = 15.0
COLLISION_PENALTY = -15.0
PROGRESS_GAIN = 2.5
ROTATION_PENALTY = 0.1


def reward(d_prev: float, d_new: float, w: float, arrived: bool = False, collided: bool = False) -> float:
    r = PROGRESS_GAIN * (d_prev - d_new) - ROTATION_PENALTY * abs(w)
    if arrived:
        r += ARRIVAL_REWARD
    if collided:
        r += COLLISION_PENALTY
    return r


@dataclass
class GoalEnvConfig:
    room_min: float = 7.0
    room_max: float = 12.0
    boxes: tuple[int, int] = (0, 0)
    peds: tuple[int, int] = (0, 0)
    goal_dist: tuple[float, float] = (1.0, 6.0)
    arrive_radius: float = 0.3
    max_steps: int = 200
    resolution: float = 0.1
    scan_sigma: float = 0.05
    ped_speed: tuple[float, float] = (0.6, 1.4)


def random_room(rng: np.random.Generator, cfg: GoalEnvConfig) -> OccupancyGrid:
    res = cfg.resolution
    w_m, h_m = rng.uniform(cfg.room_min, cfg.room_max, 2)
    wall = 2
    nx, ny = int(round(w_m / res)) + 2 * wall, int(round(h_m / res)) + 2 * wall
    cells = np.zeros((ny, nx), dtype=np.uint8)
    cells[:wall], cells[-wall:], cells[:, :wall], cells[:, -wall:] = (CellState.OCCUPIED,) * 4
    for _ in range(int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))):
        bw, bh = rng.uniform(0.4, 2.0, 2)
        cx, cy = rng.uniform(1.0, w_m - 1.0), rng.uniform(1.0, h_m - 1.0)
        x0 = wall + int((cx - bw / 2) / res)
        y0 = wall + int((cy - bh / 2) / res)
        cells[max(y0, 0):y0 + int(bh / res), max(x0, 0):x0 + int(bw / res)] = CellState.OCCUPIED
    return OccupancyGrid(cells, res, (0.0, 0.0))


def _random_free_point(grid: OccupancyGrid, rng, min_clear: float) -> np.ndarray:
    clear = grid.clearance()
    ys, xs = np.nonzero(clear >= min_clear)
    if len(xs) == 0:
        raise RuntimeError("room has no cell with the requested clearance")
    k = int(rng.integers(len(xs)))
    x, y = grid.grid_to_world(xs[k], ys[k])
    return np.array([x, y]) + rng.uniform(-0.5, 0.5, 2) * grid.resolution


class GoalReachingEnv:
    """Single robot reaching a random goal in a random room, optionally among pedestrians."""

    def __init__(self, cfg: GoalEnvConfig, seed: int, params: SimParams | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.params = params or SimParams(scan_sigma=cfg.scan_sigma, odom_alpha=(0.0, 0.0, 0.0, 0.0))
        self.stack = ScanStack()
        self.world: WorldState | None = None
        self.goal = np.zeros(2)

    def reset(self) -> Observation:
        cfg, rng = self.cfg, self.rng
        for _ in range(50):
            grid = random_room(rng, cfg)
            start = _random_free_point(grid, rng, self.params.robot_radius + 0.3)
            goal = None
            for _ in range(100):
                g = _random_free_point(grid, rng, self.params.robot_radius + 0.2)
                if cfg.goal_dist[0] <= np.hypot(*(g - start)) <= cfg.goal_dist[1]:
                    goal = g
                    break
            if goal is not None:
                break
        else:
            raise RuntimeError("could not sample a start/goal pair")
        robot = RobotState(start[0], start[1], rng.uniform(-math.pi, math.pi), radius=self.params.robot_radius)
        n_peds = int(rng.integers(cfg.peds[0], cfg.peds[1] + 1))
        peds = []
        for _ in range(n_peds):
            for _ in range(100):
                a = _random_free_point(grid, rng, 0.45)
                if np.hypot(*(a - start)) > 1.2 and all(np.hypot(*(a - q.position)) > 0.7 for q in peds):
                    break
            # routes: a patrol line, sometimes through the robot's start-goal segment
            if rng.uniform() < 0.5:
                mid = start + rng.uniform(0.2, 0.8) * (goal - start)
                b = 2 * mid - a
                ix, iy = grid.world_to_grid(*b)
                if not grid.is_free_world(*b) or grid.clearance()[iy, ix] < 0.45:
                    b = _random_free_point(grid, rng, 0.45)
            else:
                b = _random_free_point(grid, rng, 0.45)
            pref = rng.uniform(*cfg.ped_speed)
            d = b - a
            n = np.hypot(*d)
            vel = pref * d / n if n > 1e-9 else np.zeros(2)
            peds.append(Pedestrian(a, vel, 0.3, pref, np.array([b, a]), True, 0))
        self.world = WorldState(grid, robot, Crowd(peds), rng, self.params)
        self.goal = goal
        self.steps = 0
        self.vel = np.zeros(2)
        self.stack.clear()
        self.stack.push(self.world.cast_scan().ranges)
        self.dist = float(np.hypot(*(goal - start)))
        return self.observe()

    def observe(self) -> Observation:
        return make_observation(self.stack.array(), self.vel, self.goal, self.world.robot.pose)

    def step(self, action):
        w = self.world
        w.step(action)
        self.vel = np.array([w.robot.v, w.robot.w])
        self.steps += 1
        d_new = float(np.hypot(self.goal[0] - w.robot.x, self.goal[1] - w.robot.y))
        arrived = d_new < self.cfg.arrive_radius
        collided = w.last_collision != CollisionKind.NONE
        r = reward(self.dist, d_new, w.robot.w, arrived, collided)
        self.dist = d_new
        self.stack.push(w.cast_scan().ranges)
        truncated = not (arrived or collided) and self.steps >= self.cfg.max_steps
        done = arrived or collided or truncated
        info = {"success": arrived, "collision": collided, "truncated": truncated}
        return self.observe(), r, done, info
