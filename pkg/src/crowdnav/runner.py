"""Episode execution: world + localization + navigator, with online termination and logs."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dwa import DWAConfig, DWAPlanner
from .gridmap import GlobalPlanner
from .localization import MCLConfig, MonteCarloLocalizer, PoseEstimate
from .metrics import MetricThresholds, TrialOutcome, TrialRecord, classify_trial
from .navigator import DWALocalPlanner, ModeEvent, Navigator, PolicyPlanner, SwitchConfig, critic_scorer
from .recovery import RecoveryPoint
from .scenario import Scenario, build_world

METHODS = ("baseline", "rl", "rl2")
TRAJ_COLUMNS = ("t", "px", "py", "heading", "ex", "ey", "v_forward", "w", "mode", "uncertainty", "collision")
MODE_COLUMNS = ("t", "mode", "trigger", "selected_recovery_id", "deviation", "uncertainty")


@dataclass
class EpisodeSettings:
    switch: SwitchConfig = field(default_factory=SwitchConfig)
    mcl: MCLConfig = field(default_factory=MCLConfig)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)
    dwa: DWAConfig = field(default_factory=DWAConfig)
    inflation: float | None = None  # default: robot radius + 0.1 m
    keep_trace: bool = False


@dataclass
class EpisodeResult:
    record: TrialRecord
    outcome: TrialOutcome
    events: list[ModeEvent]
    headings: np.ndarray
    w: np.ndarray
    modes: list[str]
    uncertainty: np.ndarray
    trace: list = field(default_factory=list)

    @property
    def duration(self) -> float:
        return float(self.record.t[-1]) if len(self.record) else 0.0

    @property
    def mean_speed(self) -> float:
        r = self.record
        if len(r) < 2:
            return 0.0
        return float(np.hypot(*np.diff(r.p_robot, axis=0).T).sum() / (r.t[-1] - r.t[0]))


def episode_rngs(seed: int):
    world_ss, mcl_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(world_ss), np.random.default_rng(mcl_ss)


def make_navigator(method: str, sc: Scenario, net=None, recovery_points: list[RecoveryPoint] | None = None,
                   settings: EpisodeSettings | None = None, localizer=None) -> Navigator:
    s = settings or EpisodeSettings()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    inflation = sc.robot_radius + 0.1 if s.inflation is None else s.inflation
    planner = GlobalPlanner(sc.grid, inflation)
    if method == "baseline":
        dcfg = replace(s.dwa, v_max=sc.v_max, w_max=sc.w_max, robot_radius=sc.robot_radius)
        local = DWALocalPlanner(DWAPlanner(dcfg, sc.dt))
    else:
        if net is None:
            raise ValueError(f"method {method!r} needs a policy checkpoint")
        local = PolicyPlanner(net, sc.v_max, sc.w_max)
    rl2 = method == "rl2"
    return Navigator(planner, sc.goal, local, s.switch, recovery_points if rl2 else None,
                     critic_scorer(net) if rl2 else None, localizer, sc.dt, recovery_enabled=rl2)


def run_episode(sc: Scenario, method: str, seed: int, net=None, recovery_points=None,
                ped_count: int | None = None, settings: EpisodeSettings | None = None) -> EpisodeResult:
    """Run until arrival, a lost or frozen trigger, or the scenario timeout."""
    s = settings or EpisodeSettings()
    th = s.thresholds
    world_rng, mcl_rng = episode_rngs(seed)
    world = build_world(sc, world_rng, ped_count)
    mcl = MonteCarloLocalizer(sc.grid, replace(s.mcl, alpha=tuple(sc.odom_alpha)), mcl_rng)
    odom = world.read_odometry()
    mcl.initialize(world.robot.pose, odom)
    nav = make_navigator(method, sc, net, recovery_points, s, mcl)
    scan = world.cast_scan()
    est = mcl.estimate()
    nav.reset(est, odom, scan.ranges)

    dt = sc.dt
    n_max = int(round(sc.timeout / dt))
    w_lost = int(round(th.dt_lost / dt))
    w_frozen = int(round(th.dt_frozen / dt))
    goal = np.asarray(sc.goal, dtype=float)
    T, P, E, V, W, H, U, C, M = [], [], [], [], [], [], [], [], []

    def record(est: PoseEstimate, v_fwd: float, collided: bool):
        r = world.robot
        T.append(world.clock)
        P.append((r.x, r.y))
        H.append(r.heading)
        E.append((float(est.mean[0]), float(est.mean[1])))
        V.append(v_fwd)
        W.append(r.w)
        U.append(est.uncertainty)
        C.append(collided)
        M.append(nav.state.mode.value)

    record(est, 0.0, False)
    run_lost = run_frozen = 0
    reason = "timeout"
    for _ in range(n_max):
        cmd = nav.tick(scan.ranges, odom, est)
        world.step(cmd)
        scan = world.cast_scan()
        odom = world.read_odometry()
        est = mcl.step(odom, scan)
        record(est, world.forward_speed, world.last_collision.value != "none")
        p = np.array(P[-1])
        if math.hypot(*(p - goal)) < th.r_arrive:
            reason = "success"
            break
        run_lost = run_lost + 1 if math.hypot(*(p - np.array(E[-1]))) > th.d_lost else 0
        run_frozen = run_frozen + 1 if V[-1] < th.v_frozen else 0
        if run_lost >= w_lost + 1:
            reason = "lost"
            break
        if run_frozen >= w_frozen + 1:
            reason = "frozen"
            break

    rec = TrialRecord(np.array(T), np.array(P), np.array(E), np.array(V), goal, list(M), np.array(C),
                      reason, method, sc.name, ped_count, seed)
    return EpisodeResult(rec, classify_trial(rec, th), list(nav.events), np.array(H), np.array(W), M,
                         np.array(U), nav.trace if s.keep_trace else [])


# --------------------------------------------------------------------------
# Logs
# --------------------------------------------------------------------------

def format_trajectory(res: EpisodeResult) -> str:
    r = res.record
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJ_COLUMNS)
    for i in range(len(r)):
        w.writerow([f"{r.t[i]:.2f}", f"{r.p_robot[i, 0]:.4f}", f"{r.p_robot[i, 1]:.4f}", f"{res.headings[i]:.4f}",
                    f"{r.p_estimate[i, 0]:.4f}", f"{r.p_estimate[i, 1]:.4f}", f"{r.v_forward[i]:.4f}",
                    f"{res.w[i]:.4f}", res.modes[i], f"{res.uncertainty[i]:.6f}", int(r.collision[i])])
    return buf.getvalue()


def format_modes(res: EpisodeResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MODE_COLUMNS)
    for e in res.events:
        w.writerow([f"{e.t:.2f}", e.mode.value, e.trigger,
                    "" if e.selected_recovery_id is None else e.selected_recovery_id,
                    f"{e.deviation:.6f}", f"{e.uncertainty:.6f}"])
    return buf.getvalue()


def modes_path_for(traj_path: str | os.PathLike) -> Path:
    p = Path(traj_path)
    return p.with_name(p.stem + "_modes.csv")


def write_episode_logs(res: EpisodeResult, traj_path: str | os.PathLike) -> None:
    traj_path = Path(traj_path)
    traj_path.parent.mkdir(parents=True, exist_ok=True)
    traj_path.write_text(format_trajectory(res), encoding="utf-8")
    modes_path_for(traj_path).write_text(format_modes(res), encoding="utf-8")


def read_trajectory(path: str | os.PathLike) -> dict[str, np.ndarray]:
    rows = list(csv.DictReader(Path(path).read_text(encoding="utf-8").splitlines()))
    out = {}
    for c in TRAJ_COLUMNS:
        vals = [r[c] for r in rows]
        out[c] = np.array(vals) if c == "mode" else np.array(vals, dtype=float)
    return out


def read_modes(path: str | os.PathLike) -> list[dict]:
    return list(csv.DictReader(Path(path).read_text(encoding="utf-8").splitlines()))
