"""Two-mode navigator: normal goal navigation and localization recovery.

Normal mode follows a periodically re-planned global path from the pose
estimate, handing a look-ahead sub-goal to the local planner. When odometry
and the estimate disagree by more than ``eta_dev`` or the estimate's
uncertainty exceeds ``eta_cov_enter`` the navigator enters recovery: the
particle filter is re-seeded around the odometry pose and the robot drives,
by odometry, toward the best-scoring recovery point until the uncertainty
drops below ``eta_cov_exit``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .dwa import DWAPlanner
from .gridmap import GlobalPath, GlobalPlanner, PlanningError, WorldPoint, next_subgoal
from .localization import PoseEstimate, compose, relative_motion
from .policy.network import ActorCriticNet, ScanStack, make_observation, sample_action
from .recovery import (DEFAULT_WEIGHTS, RecoveryError, RecoveryPoint, fused_scores, score_accessibility,
                       score_distance, select_recovery_point)

log = logging.getLogger(__name__)


class NavMode(str, enum.Enum):
    NORMAL = "normal"
    RECOVERY = "recovery"


@dataclass
class SwitchConfig:
    eta_dev: float = 3.0  # m
    eta_cov_enter: float = 0.2  # m^2
    eta_cov_exit: float = 0.08  # m^2
    reseed_spread: float = 0.3  # m (and rad)
    reanchor: bool = True
    replan_period: float = 1.0  # s
    rescore_period: float = 1.0  # s
    switch_margin: float = 0.05
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    lookahead: float = 2.0  # m
    recovery_reach: float = 0.5  # m

    def __post_init__(self):
        for name in ("eta_dev", "eta_cov_enter", "eta_cov_exit", "reseed_spread", "replan_period",
                     "rescore_period", "lookahead"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.eta_cov_exit < self.eta_cov_enter:
            raise ValueError("eta_cov_exit must be below eta_cov_enter")


def deviation(odom_pose, estimate: PoseEstimate) -> float:
    return float(math.hypot(odom_pose[0] - estimate.mean[0], odom_pose[1] - estimate.mean[1]))


def enter_trigger(odom_pose, estimate: PoseEstimate, cfg: SwitchConfig) -> str | None:
    """Name of the condition that calls for recovery, or None."""
    if deviation(odom_pose, estimate) > cfg.eta_dev:
        return "deviation"
    if estimate.uncertainty > cfg.eta_cov_enter:
        return "covariance"
    return None


def should_enter_recovery(odom_pose, estimate: PoseEstimate, cfg: SwitchConfig) -> bool:
    return enter_trigger(odom_pose, estimate, cfg) is not None


def recovery_complete(estimate: PoseEstimate, cfg: SwitchConfig) -> bool:
    return estimate.uncertainty < cfg.eta_cov_exit


# --------------------------------------------------------------------------
# Local planners
# --------------------------------------------------------------------------

class LocalPlanner(Protocol):
    def act(self, scans: np.ndarray, ranges: np.ndarray, vel: np.ndarray, goal_xy, pose) -> np.ndarray: ...


class PolicyPlanner:
    """Actor mean of the trained network (deterministic unless an rng is given)."""

    def __init__(self, net: ActorCriticNet, v_max: float = 1.0, w_max: float = math.pi / 2,
                 rng: np.random.Generator | None = None):
        self.net, self.v_max, self.w_max, self.rng = net, v_max, w_max, rng

    def act(self, scans, ranges, vel, goal_xy, pose):
        obs = make_observation(scans, vel, goal_xy, pose)
        rng = self.rng or np.random.default_rng(0)
        cmd, _, _ = sample_action(self.net, obs, rng, self.v_max, self.w_max, deterministic=self.rng is None)
        return cmd


class DWALocalPlanner:
    def __init__(self, dwa: DWAPlanner):
        self.dwa = dwa

    def act(self, scans, ranges, vel, goal_xy, pose):
        dx, dy = goal_xy[0] - pose[0], goal_xy[1] - pose[1]
        c, s = math.cos(pose[2]), math.sin(pose[2])
        local = np.array([c * dx + s * dy, -s * dx + c * dy])
        return self.dwa.command(ranges, vel[0], vel[1], local)


# v_rl for every candidate: (scan stack, vel, candidate positions (k, 2), pose) -> (k,)
Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def critic_scorer(net: ActorCriticNet) -> Scorer:
    def score(scans, vel, points, pose):
        return score_accessibility(net, scans, vel, points, pose)
    return score


# --------------------------------------------------------------------------
# State machine
# --------------------------------------------------------------------------

@dataclass
class ModeEvent:
    t: float
    mode: NavMode
    trigger: str  # deviation | covariance | complete | reselect
    selected_recovery_id: int | None
    deviation: float
    uncertainty: float


@dataclass
class NavigatorState:
    mode: NavMode = NavMode.NORMAL
    global_path: GlobalPath | None = None
    current_subgoal: WorldPoint | None = None
    selected_recovery: int | None = None
    last_good_estimate: PoseEstimate | None = None
    replan_timer: float = 0.0
    rescore_timer: float = 0.0
    target: np.ndarray | None = None  # end point of the current route
    visited: set = field(default_factory=set)


@dataclass
class TickInfo:
    """What the navigator decided on one tick (kept for log audits)."""
    t: float
    mode: NavMode
    pose_used: np.ndarray
    odom_world: np.ndarray
    subgoal: np.ndarray
    target: np.ndarray
    selected_recovery: int | None
    deviation: float
    uncertainty: float


class Navigator:
    def __init__(self, planner: GlobalPlanner, goal, local_planner: LocalPlanner,
                 cfg: SwitchConfig | None = None, recovery_points: list[RecoveryPoint] | None = None,
                 scorer: Scorer | None = None, localizer=None, dt: float = 0.1,
                 recovery_enabled: bool = True, n_stack: int = 3):
        self.planner = planner
        self.goal = np.asarray(goal, dtype=float)[:2]
        self.local = local_planner
        self.cfg = cfg or SwitchConfig()
        self.dt = dt
        self.recovery_enabled = recovery_enabled
        self.localizer = localizer
        self.scorer = scorer
        self.points = list(recovery_points or [])
        if recovery_enabled and not self.points:
            raise RecoveryError("recovery mode needs at least one recovery point")
        if recovery_enabled and scorer is None:
            raise RecoveryError("recovery mode needs an accessibility scorer")
        self._pts = np.array([[p.position.x, p.position.y] for p in self.points]).reshape(-1, 2)
        self._v_cp = np.array([p.weight for p in self.points])
        self.stack = ScanStack(n_stack)
        self.state = NavigatorState()
        self.events: list[ModeEvent] = []
        self.trace: list[TickInfo] = []
        self.t = 0.0
        self.vel = np.zeros(2)
        self._odom_ref: np.ndarray | None = None
        self._world_ref: np.ndarray | None = None

    # odometry frame ------------------------------------------------------

    def anchor(self, odom_raw, world_pose) -> None:
        self._odom_ref = np.asarray(odom_raw, dtype=float).copy()
        self._world_ref = np.asarray(world_pose, dtype=float).copy()

    def odom_world(self, odom_raw) -> np.ndarray:
        return compose(self._world_ref, relative_motion(self._odom_ref, np.asarray(odom_raw, dtype=float)))

    # planning helpers ----------------------------------------------------

    def _plan(self, pose, target) -> GlobalPath:
        return self.planner.plan((pose[0], pose[1]), (target[0], target[1]), snap=True)

    def _replan(self, pose) -> None:
        try:
            self.state.global_path = self._plan(pose, self.state.target)
        except PlanningError as exc:
            log.debug("replan failed: %s", exc)
            if self.state.global_path is None:
                self.state.global_path = GlobalPath(np.array([pose[:2], self.state.target]),
                                                    float(np.hypot(*(self.state.target - pose[:2]))))
        self.state.replan_timer = self.cfg.replan_period

    def candidate_scores(self, scans, pose) -> np.ndarray:
        v_rl = np.asarray(self.scorer(scans, self.vel.copy(), self._pts, np.asarray(pose)), dtype=float)
        v_d = score_distance(self._pts, self.goal)
        return np.stack([v_rl, self._v_cp, v_d], axis=1)

    def _select(self, scans, pose, current: int | None) -> int:
        """Highest fused score among reachable, not-yet-visited points (with hysteresis)."""
        s = self.candidate_scores(scans, pose)
        allowed = [i for i in range(len(self.points)) if i not in self.state.visited]
        if not allowed:
            self.state.visited.clear()
            allowed = list(range(len(self.points)))
        cur = current if current in allowed else None
        while allowed:
            sub = s[allowed]
            k = allowed[select_recovery_point(sub, self.cfg.weights,
                                              allowed.index(cur) if cur is not None else None,
                                              self.cfg.switch_margin)]
            try:
                path = self._plan(pose, self._pts[k])
            except PlanningError:
                allowed.remove(k)
                if cur == k:
                    cur = None
                continue
            self.state.global_path = path
            self.state.target = self._pts[k].copy()
            self.state.replan_timer = self.cfg.replan_period
            return k
        raise PlanningError("no recovery point is reachable")

    def fused(self, scans, pose) -> np.ndarray:
        s = self.candidate_scores(scans, pose)
        return fused_scores(s[:, 0], s[:, 1], s[:, 2], self.cfg.weights)

    # lifecycle -----------------------------------------------------------

    def reset(self, estimate: PoseEstimate, odom_raw, ranges=None) -> None:
        self.state = NavigatorState(last_good_estimate=estimate, target=self.goal.copy())
        self.anchor(odom_raw, estimate.mean)
        self.events.clear()
        self.trace.clear()
        self.t = 0.0
        self.vel = np.zeros(2)
        self.stack.clear()
        if ranges is not None:
            self.stack.push(ranges)
        self._replan(estimate.mean)

    def _log(self, trigger: str, dev: float, unc: float) -> None:
        self.events.append(ModeEvent(self.t, self.state.mode, trigger, self.state.selected_recovery, dev, unc))

    def _enter_recovery(self, trigger: str, odom_pose, scans, dev: float, unc: float) -> None:
        st = self.state
        st.mode = NavMode.RECOVERY
        st.visited.clear()
        if self.localizer is not None:
            self.localizer.reseed(odom_pose, self.cfg.reseed_spread)
        st.selected_recovery = self._select(scans, odom_pose, None)
        st.rescore_timer = self.cfg.rescore_period
        self._log(trigger, dev, unc)

    def _exit_recovery(self, estimate: PoseEstimate, odom_raw, dev: float) -> None:
        st = self.state
        st.mode = NavMode.NORMAL
        st.selected_recovery = None
        st.target = self.goal.copy()
        if self.cfg.reanchor:
            self.anchor(odom_raw, estimate.mean)
        self._replan(estimate.mean)
        self._log("complete", dev, estimate.uncertainty)

    def tick(self, ranges, odom_raw, estimate: PoseEstimate) -> np.ndarray:
        """One control step: possibly switch modes, then return the velocity command."""
        st, cfg = self.state, self.cfg
        self.stack.push(ranges)
        scans = self.stack.array()
        odom_pose = self.odom_world(odom_raw)
        dev = deviation(odom_pose, estimate)
        unc = estimate.uncertainty

        if st.mode == NavMode.NORMAL and self.recovery_enabled:
            trig = enter_trigger(odom_pose, estimate, cfg)
            if trig is not None:
                self._enter_recovery(trig, odom_pose, scans, dev, unc)
        elif st.mode == NavMode.RECOVERY and recovery_complete(estimate, cfg):
            self._exit_recovery(estimate, odom_raw, dev)
            odom_pose = self.odom_world(odom_raw)

        if st.mode == NavMode.NORMAL:
            pose = estimate.mean
            st.last_good_estimate = estimate
            st.replan_timer -= self.dt
            if st.replan_timer <= 1e-9:
                self._replan(pose)
        else:
            pose = odom_pose
            st.rescore_timer -= self.dt
            st.replan_timer -= self.dt
            reached = np.hypot(*(st.target - pose[:2])) < cfg.recovery_reach
            if reached:
                st.visited.add(st.selected_recovery)
            if reached or st.rescore_timer <= 1e-9:
                prev = st.selected_recovery
                st.selected_recovery = self._select(scans, pose, None if reached else prev)
                st.rescore_timer = cfg.rescore_period
                if st.selected_recovery != prev:
                    self._log("reselect", dev, unc)
            if st.replan_timer <= 1e-9:
                self._replan(pose)

        sub = next_subgoal(st.global_path, pose, cfg.lookahead)
        st.current_subgoal = sub
        cmd = np.asarray(self.local.act(scans, np.asarray(ranges), self.vel, (sub.x, sub.y), pose), dtype=float)
        self.trace.append(TickInfo(self.t, st.mode, np.asarray(pose).copy(), odom_pose, np.array([sub.x, sub.y]),
                                   st.target.copy(), st.selected_recovery, dev, unc))
        self.vel = cmd.copy()
        self.t += self.dt
        return cmd
