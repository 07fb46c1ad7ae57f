"""Trial outcome classification (lost / frozen / success) and benchmark aggregation."""
from __future__ import annotations

import csv
import enum
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class TrialOutcome(str, enum.Enum):
    LOST = "lost"
    FROZEN = "frozen"
    SUCCESS = "success"


@dataclass(frozen=True)
class MetricThresholds:
    d_lost: float = 3.0
    dt_lost: float = 10.0
    v_frozen: float = 0.2
    dt_frozen: float = 10.0
    r_arrive: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"threshold {k} must be positive, got {v}")


@dataclass
class TrialRecord:
    """Per-step series of one episode, all sampled at a fixed ``dt``."""

    t: np.ndarray
    p_robot: np.ndarray  # (n, 2) ground truth
    p_estimate: np.ndarray  # (n, 2)
    v_forward: np.ndarray
    goal: np.ndarray
    mode: list = field(default_factory=list)
    collision: np.ndarray | None = None  # bool per step
    terminated_reason: str = ""
    method: str = ""
    scenario: str = ""
    density: int | None = None
    seed: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        n = len(self.t)
        self.p_robot = np.asarray(self.p_robot, dtype=float).reshape(n, 2)
        self.p_estimate = np.asarray(self.p_estimate, dtype=float).reshape(n, 2)
        self.v_forward = np.asarray(self.v_forward, dtype=float).reshape(n)
        self.goal = np.asarray(self.goal, dtype=float).reshape(2)
        if self.collision is None:
            self.collision = np.zeros(n, dtype=bool)
        self.collision = np.asarray(self.collision, dtype=bool).reshape(n)
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("record times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0


def _window_len(record: TrialRecord, seconds: float) -> int | None:
    if len(record) < 2:
        return None
    return int(round(seconds / record.dt))


def first_full_window(mask: np.ndarray, w: int) -> int | None:
    """Earliest i with ``mask[i..i+w]`` all true (w + 1 samples), else None."""
    run = 0
    for j, m in enumerate(mask):
        run = run + 1 if m else 0
        if run >= w + 1:
            return j - w
    return None


def is_lost(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> float | None:
    """Start time of the first window of length ``dt_lost`` whose every sample has
    position error above ``d_lost``."""
    w = _window_len(record, th.dt_lost)
    if w is None:
        return None
    err = np.hypot(*(record.p_robot - record.p_estimate).T)
    i = first_full_window(err > th.d_lost, w)
    return None if i is None else float(record.t[i])


def is_frozen(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> float | None:
    """Start time of the first ``dt_frozen`` window with forward speed below ``v_frozen`` throughout."""
    w = _window_len(record, th.dt_frozen)
    if w is None:
        return None
    i = first_full_window(record.v_forward < th.v_frozen, w)
    return None if i is None else float(record.t[i])


def is_success(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> float | None:
    d = np.hypot(*(record.p_robot - record.goal).T)
    hit = np.nonzero(d < th.r_arrive)[0]
    return float(record.t[hit[0]]) if len(hit) else None


def decision_times(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> dict:
    """Time at which each condition becomes known online (window end for lost/frozen)."""
    out = {}
    s = is_success(record, th)
    if s is not None:
        out[TrialOutcome.SUCCESS] = s
    lo = is_lost(record, th)
    if lo is not None:
        out[TrialOutcome.LOST] = lo + th.dt_lost
    fr = is_frozen(record, th)
    if fr is not None:
        out[TrialOutcome.FROZEN] = fr + th.dt_frozen
    return out


_PRECEDENCE = (TrialOutcome.SUCCESS, TrialOutcome.LOST, TrialOutcome.FROZEN)


def classify_trial(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> TrialOutcome:
    """Earliest-decided condition wins; equal times resolve success, lost, frozen.

    Without any trigger (timeout) the trial is frozen if the mean forward speed
    over the last ``dt_frozen`` seconds is below ``v_frozen`` and lost otherwise.
    """
    times = decision_times(record, th)
    if times:
        return min(_PRECEDENCE, key=lambda o: (times.get(o, np.inf), _PRECEDENCE.index(o)))
    if len(record) == 0:
        return TrialOutcome.FROZEN
    w = _window_len(record, th.dt_frozen) or 0
    tail = record.v_forward[-(w + 1):] if w else record.v_forward
    return TrialOutcome.FROZEN if float(np.mean(tail)) < th.v_frozen else TrialOutcome.LOST


def success_velocity(record: TrialRecord, th: MetricThresholds = MetricThresholds()) -> float:
    """Ground-truth path length up to arrival divided by the time taken."""
    t_arr = is_success(record, th)
    if t_arr is None:
        return 0.0
    k = int(np.searchsorted(record.t, t_arr)) + 1
    seg = np.diff(record.p_robot[:k], axis=0)
    dur = t_arr - record.t[0]
    return float(np.hypot(*seg.T).sum() / dur) if dur > 0 else 0.0


def collision_events(record: TrialRecord) -> int:
    c = record.collision.astype(int)
    return int(np.sum(np.diff(np.concatenate([[0], c])) == 1))


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------

SUMMARY_COLUMNS = ("method", "scenario", "trials", "lost", "frozen", "success", "mean_velocity", "collisions")


@dataclass
class SummaryRow:
    method: str
    scenario: str
    trials: int
    lost: float
    frozen: float
    success: float
    mean_velocity: float
    collisions: int
    density: int | None = None


@dataclass
class BenchmarkSummary:
    rows: list[SummaryRow]

    def cell(self, method: str, scenario: str | None = None, density: int | None = None) -> SummaryRow:
        for r in self.rows:
            if r.method == method and (scenario is None or r.scenario == scenario) and \
                    (density is None or r.density == density):
                return r
        raise KeyError((method, scenario, density))

    @property
    def has_density(self) -> bool:
        return any(r.density is not None for r in self.rows)

    def columns(self) -> tuple:
        return SUMMARY_COLUMNS + (("density",) if self.has_density else ())

    def write_csv(self, path: str | os.PathLike) -> None:
        cols = self.columns()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                d = asdict(r)
                w.writerow([_fmt(d[c]) for c in cols])

    def write_json(self, path: str | os.PathLike) -> None:
        cols = self.columns()
        doc = [{c: asdict(r)[c] for c in cols} for r in self.rows]
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else v


def aggregate_cell(outcomes: list[TrialOutcome], velocities: list[float], collisions: list[int],
                   method: str = "", scenario: str = "", density: int | None = None) -> SummaryRow:
    n = len(outcomes)
    if n == 0:
        raise ValueError("cannot aggregate zero trials")
    counts = {o: sum(1 for x in outcomes if x == o) for o in TrialOutcome}
    succ_v = [v for o, v in zip(outcomes, velocities) if o == TrialOutcome.SUCCESS]
    lost, frozen = counts[TrialOutcome.LOST] / n, counts[TrialOutcome.FROZEN] / n
    # complement keeps lost + frozen + success == 1.0 exactly in floating point
    success = 1.0 - (lost + frozen)
    return SummaryRow(method, scenario, n, lost, frozen, success, float(np.mean(succ_v)) if succ_v else 0.0,
                      int(sum(collisions)), density)


def aggregate(records: list[TrialRecord], th: MetricThresholds = MetricThresholds()) -> BenchmarkSummary:
    """Group records by (method, scenario, density) and compute outcome rates per group."""
    if not records:
        raise ValueError("cannot aggregate zero records")
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.scenario, r.density), []).append(r)
    rows = []
    for (method, scenario, density), recs in groups.items():
        outcomes = [classify_trial(r, th) for r in recs]
        vel = [success_velocity(r, th) for r in recs]
        rows.append(aggregate_cell(outcomes, vel, [collision_events(r) for r in recs], method, scenario, density))
    return BenchmarkSummary(rows)
