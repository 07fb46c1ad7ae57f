import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdnav.dwa import DWAConfig, DWAPlanner
from crowdnav.simworld import BEAM_ANGLES, MAX_RANGE

OPEN = np.full(len(BEAM_ANGLES), MAX_RANGE)


def wall_ahead(dist):
    """Scan of an infinite wall perpendicular to the heading at ``dist``."""
    c = np.cos(BEAM_ANGLES)
    with np.errstate(divide="ignore"):
        r = np.where(c > 1e-9, dist / c, MAX_RANGE)
    return np.minimum(r, MAX_RANGE)


def test_window_respects_acceleration_and_limits():
    p = DWAPlanner(DWAConfig(), 0.1)
    vs, ws = p.window(0.0, 0.0)
    assert vs[0] == 0.0 and vs[-1] == pytest.approx(0.15)
    assert ws[0] == pytest.approx(-0.4) and ws[-1] == pytest.approx(0.4)
    vs, ws = p.window(1.0, math.pi / 2)
    assert vs[-1] == 1.0 and ws[-1] == pytest.approx(math.pi / 2)


def test_rollouts_follow_constant_velocity_arcs():
    p = DWAPlanner(DWAConfig(horizon=1.0), 0.1)
    traj = p.rollouts(np.array([0.5]), np.array([0.0, 0.8]))
    t = np.arange(1, 11) * 0.1
    np.testing.assert_allclose(traj[0, :, 0], 0.5 * t, atol=1e-12)
    np.testing.assert_allclose(traj[0, :, 1], 0.0, atol=1e-12)
    # arc of radius v / w about (0, v / w)
    rad = 0.5 / 0.8
    np.testing.assert_allclose(np.hypot(traj[1, :, 0], traj[1, :, 1] - rad), rad, atol=1e-12)
    np.testing.assert_allclose(np.arctan2(traj[1, :, 0], rad - traj[1, :, 1]), 0.8 * t, atol=1e-12)


def test_open_field_drives_toward_goal():
    p = DWAPlanner(DWAConfig(), 0.1)
    v, w = p.command(OPEN, 0.5, 0.0, np.array([5.0, 0.0]))
    assert v == pytest.approx(0.65) and abs(w) < 1e-9


def test_turns_toward_lateral_goal():
    p = DWAPlanner(DWAConfig(), 0.1)
    assert p.command(OPEN, 0.3, 0.0, np.array([1.0, 3.0]))[1] > 0
    assert p.command(OPEN, 0.3, 0.0, np.array([1.0, -3.0]))[1] < 0


def test_blocked_front_stops_and_turns():
    p = DWAPlanner(DWAConfig(), 0.1)
    v, w = p.command(wall_ahead(0.4), 0.0, 0.0, np.array([0.0, 2.0]))
    assert v == 0.0
    assert w == pytest.approx(math.pi / 2)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.3, 4.0), st.floats(0.0, 1.0), st.floats(-1.5, 1.5), st.floats(-math.pi, math.pi))
def test_chosen_rollout_keeps_safety_margin(wall, v0, w0, goal_bearing):
    cfg = DWAConfig()
    p = DWAPlanner(cfg, 0.1)
    scan = wall_ahead(wall)
    goal = 3.0 * np.array([math.cos(goal_bearing), math.sin(goal_bearing)])
    v, w = p.command(scan, v0, w0, goal)
    if v == 0.0:
        return
    sel = slice(None, None, cfg.beam_step)
    pts = np.c_[scan[sel] * np.cos(BEAM_ANGLES[sel]), scan[sel] * np.sin(BEAM_ANGLES[sel])]
    t = np.arange(1, int(round(cfg.horizon / cfg.sim_dt)) + 1) * cfg.sim_dt
    if abs(w) < 1e-6:
        path = np.c_[v * t, np.zeros_like(t)]
    else:
        path = np.c_[v / w * np.sin(w * t), v / w * (1 - np.cos(w * t))]
    d = min(np.hypot(*(q - pts).T).min() for q in path)
    assert d - cfg.robot_radius > cfg.safety_margin
