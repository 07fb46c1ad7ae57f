"""Dynamic-window local planner used by the baseline comparator.

Candidate (v, w) pairs inside the reachable window are rolled out for a short
horizon against the current scan endpoints. Pairs whose rollout comes closer
than the robot radius plus a safety margin are inadmissible; among the rest the
planner maximises a weighted sum of goal heading, clearance and speed. With no
admissible forward motion it stops and turns toward the goal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simworld import BEAM_ANGLES, wrap_angle


@dataclass
class DWAConfig:
    v_max: float = 1.0
    w_max: float = math.pi / 2
    acc_v: float = 1.5  # m/s^2
    acc_w: float = 4.0  # rad/s^2
    n_v: int = 7
    n_w: int = 15
    horizon: float = 1.5  # s
    sim_dt: float = 0.1
    robot_radius: float = 0.17
    safety_margin: float = 0.35
    w_heading: float = 1.0
    w_clearance: float = 0.4
    w_speed: float = 0.6
    clearance_cap: float = 1.5
    beam_step: int = 2
    stop_turn_gain: float = 1.0


class DWAPlanner:
    def __init__(self, cfg: DWAConfig | None = None, control_dt: float = 0.1):
        self.cfg = cfg or DWAConfig()
        self.control_dt = control_dt

    def window(self, v: float, w: float):
        c, dt = self.cfg, self.control_dt
        vs = np.linspace(max(0.0, v - c.acc_v * dt), min(c.v_max, v + c.acc_v * dt), c.n_v)
        ws = np.linspace(max(-c.w_max, w - c.acc_w * dt), min(c.w_max, w + c.acc_w * dt), c.n_w)
        return vs, ws

    def rollouts(self, vs: np.ndarray, ws: np.ndarray) -> np.ndarray:
        """Robot-frame positions (n_pairs, n_steps, 2) of constant-velocity arcs."""
        c = self.cfg
        t = np.arange(1, int(round(c.horizon / c.sim_dt)) + 1) * c.sim_dt
        V, W = np.meshgrid(vs, ws, indexing="ij")
        V, W = V.reshape(-1, 1), W.reshape(-1, 1)
        th = W * t
        small = np.abs(W) < 1e-6
        Wsafe = np.where(small, 1.0, W)
        x = np.where(small, V * t, V / Wsafe * np.sin(th))
        y = np.where(small, 0.0, V / Wsafe * (1 - np.cos(th)))
        return np.stack([x, y], axis=-1)

    def command(self, ranges: np.ndarray, v: float, w: float, goal_local: np.ndarray) -> np.ndarray:
        """Velocity command given the scan, current (v, w) and the sub-goal in the robot frame."""
        c = self.cfg
        ranges = np.asarray(ranges, dtype=float)
        sel = slice(None, None, c.beam_step)
        r, a = ranges[sel], BEAM_ANGLES[sel]
        obs = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        vs, ws = self.window(v, w)
        traj = self.rollouts(vs, ws)
        d = np.sqrt(((traj[:, :, None, :] - obs[None, None]) ** 2).sum(-1)).min(axis=(1, 2))
        V = np.repeat(vs, len(ws))
        W = np.tile(ws, len(vs))
        clear = d - c.robot_radius
        stop_dist = V * V / (2 * c.acc_v)
        ok = (clear > c.safety_margin) & (clear - c.safety_margin > stop_dist) & (V > 1e-6)
        if not np.any(ok):
            bearing = math.atan2(goal_local[1], goal_local[0])
            return np.array([0.0, float(np.clip(c.stop_turn_gain * bearing, -c.w_max, c.w_max))])
        end = traj[:, -1]
        heading_end = W * c.horizon
        goal_dir = np.arctan2(goal_local[1] - end[:, 1], goal_local[0] - end[:, 0])
        heading = 1 - np.abs(wrap_angle(goal_dir - heading_end)) / math.pi
        score = (c.w_heading * heading + c.w_clearance * np.minimum(clear, c.clearance_cap) / c.clearance_cap
                 + c.w_speed * V / c.v_max)
        score[~ok] = -np.inf
        k = int(np.argmax(score))
        return np.array([V[k], W[k]])
