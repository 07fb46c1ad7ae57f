"""Scenario config files (YAML) and world construction.

Schema (all lengths in meters, angles in radians)::

    name: corridor
    map: corridor.pgm            # relative to this file
    seed: 0
    robot: {start: [x, y, heading], goal: [x, y], radius: 0.17, v_max: 1.0, w_max: 1.5708}
    pedestrians:
      count: 20
      radius: 0.3
      speed_range: [0.6, 1.4]
      lateral_spread: 0.6        # spawn jitter around route polylines
      spawn_zones: []            # optional [[xmin, ymin, xmax, ymax], ...]
      routes:
        - {waypoints: [[x, y], ...], loop: true}
      paper_count: 100           # crowd size this density stands in for
      area_ratio: 0.12           # desk-scale free area / full-size free area
    noise: {scan_sigma: 0.05, odom_alpha: [0.05, 0.01, 0.05, 0.01]}
    episode: {timeout: 180.0, dt: 0.1}
    recovery_points: corridor.rp.csv   # optional, relative to this file
"""
from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .gridmap import OccupancyGrid, load_map
from .simworld import Crowd, Pedestrian, RobotState, SimParams, WorldState

DATA_DIR = Path(__file__).parent / "data"


class ScenarioError(ValueError):
    pass


@dataclass
class Route:
    waypoints: np.ndarray
    loop: bool = True


@dataclass
class Scenario:
    name: str
    map_path: Path
    start: tuple[float, float, float]
    goal: tuple[float, float]
    seed: int = 0
    robot_radius: float = 0.17
    v_max: float = 1.0
    w_max: float = math.pi / 2
    ped_count: int = 0
    ped_radius: float = 0.3
    speed_range: tuple[float, float] = (0.6, 1.4)
    lateral_spread: float = 0.5
    spawn_zones: list = field(default_factory=list)
    routes: list[Route] = field(default_factory=list)
    scan_sigma: float = 0.05
    odom_alpha: tuple[float, float, float, float] = (0.05, 0.01, 0.05, 0.01)
    timeout: float = 180.0
    dt: float = 0.1
    recovery_points: Path | None = None
    meta: dict = field(default_factory=dict)
    source: Path | None = None
    _grid: OccupancyGrid | None = field(default=None, repr=False)

    @property
    def grid(self) -> OccupancyGrid:
        if self._grid is None:
            self._grid = load_map(self.map_path)
        return self._grid

    def sim_params(self) -> SimParams:
        return SimParams(dt=self.dt, v_max=self.v_max, w_max=self.w_max, robot_radius=self.robot_radius,
                         scan_sigma=self.scan_sigma, odom_alpha=tuple(self.odom_alpha))

    def with_overrides(self, **kw) -> "Scenario":
        s = copy.copy(self)
        for k, v in kw.items():
            if not hasattr(s, k):
                raise ScenarioError(f"unknown scenario field {k!r}")
            setattr(s, k, v)
        return s


def resolve_scenario_path(name_or_path: str | os.PathLike) -> Path:
    """Accept a file path or the name of a bundled scenario (``corridor`` etc.)."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = DATA_DIR / "scenarios" / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    raise ScenarioError(f"scenario {name_or_path!r} not found (looked for {p} and {bundled})")


def _pair(v, n, what):
    try:
        t = tuple(float(x) for x in v)
    except TypeError as exc:
        raise ScenarioError(f"{what} must be a list of {n} numbers") from exc
    if len(t) != n or not all(math.isfinite(x) for x in t):
        raise ScenarioError(f"{what} must be {n} finite numbers, got {v!r}")
    return t


def load_scenario(path: str | os.PathLike) -> Scenario:
    path = resolve_scenario_path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    base = path.parent
    try:
        robot = doc["robot"]
        peds = doc.get("pedestrians", {}) or {}
        noise = doc.get("noise", {}) or {}
        ep = doc.get("episode", {}) or {}
        routes = [Route(np.array(r["waypoints"], dtype=float).reshape(-1, 2), bool(r.get("loop", True)))
                  for r in peds.get("routes", [])]
        rp = doc.get("recovery_points")
        sc = Scenario(
            name=str(doc.get("name", path.stem)),
            map_path=base / doc["map"],
            start=_pair(robot["start"], 3, "robot.start"),
            goal=_pair(robot["goal"], 2, "robot.goal"),
            seed=int(doc.get("seed", 0)),
            robot_radius=float(robot.get("radius", 0.17)),
            v_max=float(robot.get("v_max", 1.0)),
            w_max=float(robot.get("w_max", math.pi / 2)),
            ped_count=int(peds.get("count", 0)),
            ped_radius=float(peds.get("radius", 0.3)),
            speed_range=_pair(peds.get("speed_range", (0.6, 1.4)), 2, "pedestrians.speed_range"),
            lateral_spread=float(peds.get("lateral_spread", 0.5)),
            spawn_zones=[_pair(z, 4, "spawn zone") for z in peds.get("spawn_zones", [])],
            routes=routes,
            scan_sigma=float(noise.get("scan_sigma", 0.05)),
            odom_alpha=_pair(noise.get("odom_alpha", (0.05, 0.01, 0.05, 0.01)), 4, "noise.odom_alpha"),
            timeout=float(ep.get("timeout", 180.0)),
            dt=float(ep.get("dt", 0.1)),
            recovery_points=(base / rp) if rp else None,
            meta={k: peds[k] for k in ("paper_count", "area_ratio") if k in peds},
            source=path,
        )
    except KeyError as exc:
        raise ScenarioError(f"{path}: missing required key {exc}") from exc
    if sc.ped_count < 0 or sc.timeout <= 0 or sc.dt <= 0:
        raise ScenarioError(f"{path}: counts/timeouts must be non-negative/positive")
    if sc.ped_count > 0 and not routes:
        raise ScenarioError(f"{path}: pedestrians need at least one route")
    return sc


def _sample_on_route(route: Route, rng: np.random.Generator, spread: float):
    wps = route.waypoints
    pts = np.vstack([wps, wps[:1]]) if route.loop and len(wps) > 1 else wps
    if len(pts) == 1:
        return wps[0] + rng.normal(0, spread, 2), 0
    seg = np.hypot(*np.diff(pts, axis=0).T)
    k = int(rng.choice(len(seg), p=seg / seg.sum()))
    u = rng.uniform()
    p = pts[k] + u * (pts[k + 1] - pts[k])
    return p + rng.normal(0, spread, 2), (k + 1) % len(wps)


def spawn_crowd(sc: Scenario, grid: OccupancyGrid, rng: np.random.Generator, count: int) -> Crowd:
    peds: list[Pedestrian] = []
    clearance = grid.clearance()
    start = np.array(sc.start[:2])
    for i in range(count):
        route = sc.routes[i % len(sc.routes)]
        for _ in range(200):
            if sc.spawn_zones:
                z = sc.spawn_zones[int(rng.integers(len(sc.spawn_zones)))]
                pos = np.array([rng.uniform(z[0], z[2]), rng.uniform(z[1], z[3])])
                d = np.hypot(*(route.waypoints - pos).T)
                target = int(np.argmin(d))
            else:
                pos, target = _sample_on_route(route, rng, sc.lateral_spread)
            ix, iy = grid.world_to_grid(*pos)
            if not (grid.in_bounds(ix, iy) and clearance[iy, ix] > sc.ped_radius + grid.resolution):
                continue
            if np.hypot(*(pos - start)) < 1.5:
                continue
            if any(np.hypot(*(pos - q.position)) < 2 * sc.ped_radius + 0.05 for q in peds):
                continue
            break
        else:
            raise ScenarioError(f"could not place pedestrian {i} in scenario {sc.name!r}")
        pref = rng.uniform(*sc.speed_range)
        to = route.waypoints[target] - pos
        n = np.hypot(*to)
        vel = pref * to / n if n > 1e-9 else np.zeros(2)
        peds.append(Pedestrian(pos, vel, sc.ped_radius, pref, route.waypoints, route.loop, target))
    return Crowd(peds)


def build_world(sc: Scenario, rng: np.random.Generator, ped_count: int | None = None) -> WorldState:
    grid = sc.grid
    count = sc.ped_count if ped_count is None else ped_count
    crowd = spawn_crowd(sc, grid, rng, count)
    x, y, th = sc.start
    robot = RobotState(x, y, th, radius=sc.robot_radius)
    return WorldState(grid=grid, robot=robot, crowd=crowd, rng=rng, params=sc.sim_params())
