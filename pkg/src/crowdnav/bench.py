"""Batch benchmark: scenarios x methods x seeds (x crowd densities), run in a worker pool."""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .metrics import MetricThresholds, aggregate, BenchmarkSummary, success_velocity, collision_events
from .recovery import read_recovery_points
from .runner import METHODS, EpisodeSettings, run_episode, write_episode_logs
from .scenario import DATA_DIR, ScenarioError, load_scenario, resolve_scenario_path

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINT = DATA_DIR / "policy.ckpt"
TRIAL_COLUMNS = ("method", "scenario", "density", "seed", "outcome", "reason", "t_end", "mean_velocity",
                 "collisions", "recovery_cycles")


class PlanError(ValueError):
    pass


@dataclass
class BenchPlan:
    scenarios: list[str]
    methods: list[str]
    seeds: list[int]
    densities: list[int] | None = None
    checkpoint: Path | None = None
    recovery_points: dict[str, Path] = field(default_factory=dict)
    timeout: float | None = None
    write_logs: bool = True

    def validate(self) -> "BenchPlan":
        if not self.seeds:
            raise PlanError("plan needs at least one seed")
        if not self.methods:
            raise PlanError("plan needs at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise PlanError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
        if not self.scenarios:
            raise PlanError("plan needs at least one scenario")
        return self


def load_bench_plan(path: str | os.PathLike) -> BenchPlan:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise PlanError(f"cannot read bench plan {path}: {exc}") from exc
    return plan_from_dict(doc, path.parent)


def plan_from_dict(doc: dict, base: Path = Path(".")) -> BenchPlan:
    known = {"scenarios", "methods", "seeds", "seed_base", "densities", "checkpoint", "recovery_points",
             "timeout", "write_logs"}
    unknown = set(doc) - known
    if unknown:
        raise PlanError(f"unknown plan keys: {sorted(unknown)}")
    seeds = doc.get("seeds", 1)
    if isinstance(seeds, int):
        seeds = list(range(int(doc.get("seed_base", 0)), int(doc.get("seed_base", 0)) + seeds))
    ck = doc.get("checkpoint")
    rps = {k: _rel(base, v) for k, v in (doc.get("recovery_points") or {}).items()}
    return BenchPlan(
        scenarios=list(doc.get("scenarios", [])),
        methods=list(doc.get("methods", list(METHODS))),
        seeds=[int(s) for s in seeds],
        densities=[int(d) for d in doc["densities"]] if doc.get("densities") else None,
        checkpoint=_rel(base, ck) if ck else None,
        recovery_points=rps,
        timeout=float(doc["timeout"]) if doc.get("timeout") else None,
        write_logs=bool(doc.get("write_logs", True)),
    ).validate()


def _rel(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def check_assets(plan: BenchPlan) -> dict:
    """Resolve every file the plan needs; raise before any episode starts if one is missing."""
    missing, scen, rps = [], {}, {}
    for name in plan.scenarios:
        try:
            sc = load_scenario(resolve_scenario_path(name))
        except ScenarioError as exc:
            missing.append(str(exc))
            continue
        if not sc.map_path.exists():
            missing.append(f"map {sc.map_path} (scenario {name})")
        scen[name] = sc
        if "rl2" in plan.methods:
            rp = plan.recovery_points.get(name) or sc.recovery_points
            if rp is None or not Path(rp).exists():
                missing.append(f"recovery-point file {rp} (scenario {name})")
            rps[name] = rp
    ck = plan.checkpoint or DEFAULT_CHECKPOINT
    if {"rl", "rl2"} & set(plan.methods) and not Path(ck).exists():
        missing.append(f"checkpoint {ck}")
    if missing:
        raise PlanError("missing assets: " + "; ".join(missing))
    return {"scenarios": scen, "recovery_points": rps, "checkpoint": ck}


# --------------------------------------------------------------------------
# Worker side
# --------------------------------------------------------------------------

_W: dict = {}


def _init_worker(checkpoint, rp_paths: dict, settings: EpisodeSettings):
    import torch
    torch.set_num_threads(1)
    from .policy.checkpoint import load_checkpoint
    _W["net"] = load_checkpoint(checkpoint)[0] if checkpoint else None
    _W["rps"] = {k: read_recovery_points(v) for k, v in rp_paths.items()}
    _W["settings"] = settings


def _run_one(job: tuple):
    sc, method, seed, density, log_path = job
    res = run_episode(sc, method, seed, _W["net"], _W["rps"].get(sc.name), density, _W["settings"])
    if log_path:
        write_episode_logs(res, log_path)
    cycles = sum(1 for e in res.events if e.trigger == "complete")
    row = {"method": method, "scenario": sc.name, "density": "" if density is None else density, "seed": seed,
           "outcome": res.outcome.value, "reason": res.record.terminated_reason, "t_end": round(res.duration, 2),
           "mean_velocity": round(success_velocity(res.record, _W["settings"].thresholds), 4),
           "collisions": collision_events(res.record), "recovery_cycles": cycles}
    return row, res.record, [(e.t, e.mode.value, e.trigger) for e in res.events]


def trial_log_name(method: str, scenario: str, seed: int, density: int | None) -> str:
    d = f"_d{density}" if density is not None else ""
    return f"{scenario}_{method}{d}_s{seed}.csv"


@dataclass
class BenchResult:
    summary: BenchmarkSummary
    trials: list[dict]
    records: list


def run_bench(plan: BenchPlan, out_dir: str | os.PathLike | None, jobs: int = 1,
              settings: EpisodeSettings | None = None, thresholds: MetricThresholds | None = None) -> BenchResult:
    assets = check_assets(plan)
    settings = settings or EpisodeSettings()
    if thresholds is not None:
        settings.thresholds = thresholds
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "trials").mkdir(parents=True, exist_ok=True)
    needs_net = bool({"rl", "rl2"} & set(plan.methods))
    jobs_list = []
    for name in plan.scenarios:
        sc = assets["scenarios"][name]
        if plan.timeout:
            sc = sc.with_overrides(timeout=plan.timeout)
        for density in (plan.densities or [None]):
            for method in plan.methods:
                for seed in plan.seeds:
                    lp = out / "trials" / trial_log_name(method, name, seed, density) if out and plan.write_logs else None
                    jobs_list.append((sc, method, seed, density, lp))
    init_args = (assets["checkpoint"] if needs_net else None, assets["recovery_points"], settings)
    if jobs <= 1:
        _init_worker(*init_args)
        results = [_run_one(j) for j in jobs_list]
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker,
                                 initargs=init_args) as ex:
            results = list(ex.map(_run_one, jobs_list, chunksize=1))
    rows = [r[0] for r in results]
    records = [r[1] for r in results]
    summary = aggregate(records, settings.thresholds)
    if out:
        summary.write_csv(out / "summary.csv")
        summary.write_json(out / "summary.json")
        with open(out / "trials.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, TRIAL_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return BenchResult(summary, rows, records)


def jobs_from_env(default: int) -> int:
    v = os.environ.get("CROWDNAV_JOBS")
    if v:
        try:
            n = int(v)
        except ValueError as exc:
            raise PlanError(f"CROWDNAV_JOBS must be an integer, got {v!r}") from exc
        if n < 1:
            raise PlanError("CROWDNAV_JOBS must be at least 1")
        return n
    return max(1, int(default))


def cell_rates(rows: list[dict], method: str, density=None) -> dict:
    sel = [r for r in rows if r["method"] == method and (density is None or r["density"] == density)]
    n = len(sel)
    return {o: sum(r["outcome"] == o for r in sel) / n for o in ("lost", "frozen", "success")} if n else {}

