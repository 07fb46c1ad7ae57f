"""``crowdnav`` command line: map-features, train, run, bench.

Exit codes: 0 success, 1 validation error (bad input, missing file), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .gridmap import MapError, load_map
from .metrics import success_velocity

log = logging.getLogger("crowdnav")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _common(top: bool) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; only the
    # top-level copy carries defaults so a subcommand never overwrites them
    def d(v):
        return v if top else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(None), help="random seed (overrides config files)")
    p.add_argument("--out", type=Path, default=d(None), help="output directory")
    p.add_argument("--jobs", type=int, default=d(1), help="worker processes (CROWDNAV_JOBS overrides)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(top=False)
    ap = argparse.ArgumentParser(prog="crowdnav", description=__doc__.splitlines()[0], parents=[_common(top=True)])
    sub = ap.add_subparsers(dest="command", required=True)

    mf = sub.add_parser("map-features", parents=[common], help="extract recovery points from a map")
    mf.add_argument("map", type=Path)
    mf.add_argument("--robot-radius", type=float, default=0.17)
    mf.add_argument("--margin", type=float, default=0.3)
    mf.add_argument("--k-init", type=int, default=None)
    mf.add_argument("--split-distance", type=float, default=3.0)
    mf.add_argument("--harris-k", type=float, default=0.04)
    mf.add_argument("--nms-radius", type=int, default=4)

    tr = sub.add_parser("train", parents=[common], help="train the actor-critic policy")
    tr.add_argument("config", type=Path)

    rn = sub.add_parser("run", parents=[common], help="run one episode with full logging")
    rn.add_argument("--scenario", required=True)
    rn.add_argument("--method", required=True, choices=["baseline", "rl", "rl2"])
    rn.add_argument("--checkpoint", type=Path, default=None)
    rn.add_argument("--recovery-points", type=Path, default=None)
    rn.add_argument("--peds", type=int, default=None, help="override the pedestrian count")

    bn = sub.add_parser("bench", parents=[common], help="run a benchmark plan")
    bn.add_argument("plan", type=Path)
    return ap


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_map_features(args) -> int:
    from .recovery import HarrisParams, RecoveryError, extract_recovery_points, write_overlay, \
        write_recovery_points
    try:
        grid = load_map(args.map)
    except MapError as exc:
        raise CLIError(str(exc)) from exc
    hp = HarrisParams(k=args.harris_k, nms_radius=args.nms_radius)
    try:
        points, corners = extract_recovery_points(grid, args.robot_radius, args.margin, hp, args.k_init,
                                                  args.split_distance)
    except RecoveryError as exc:
        raise CLIError(str(exc), EXIT_RUNTIME) from exc
    out = args.out or args.map.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = args.map.stem
    rp_path = out / f"{stem}.rp.csv"
    write_recovery_points(rp_path, points)
    write_overlay(out / f"{stem}_overlay.ppm", grid, points, corners)
    weights = np.array([p.weight for p in points])
    print(f"corners={len(corners)} recovery_points={len(points)} weight_sum={weights.sum():.6f}")
    print("weights: " + " ".join(f"{w:.3f}" for w in weights))
    print(f"wrote {rp_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch
    from .policy import ConfigError, NonFiniteLossError, load_train_config, train
    from .policy.ppo import default_env_factory, evaluate
    try:
        cfg = load_train_config(args.config)
    except ConfigError as exc:
        raise CLIError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    torch.set_num_threads(1)
    out = args.out or Path("train_out")
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "policy.ckpt", out / "train_log.csv"
    try:
        res = train(default_env_factory, cfg, ckpt, log_path, progress=True)
    except NonFiniteLossError as exc:
        raise CLIError(f"training aborted: {exc}; checkpoint saved to {ckpt}", EXIT_RUNTIME) from exc
    rate = evaluate(res.net, cfg.curriculum[-1].env, cfg.eval_episodes, cfg.seed + 10_000)
    print(f"steps={res.steps} eval_success={rate:.3f} checkpoint={ckpt} log={log_path}")
    return EXIT_OK


def _load_net(path: Path | None):
    from .bench import DEFAULT_CHECKPOINT
    from .policy.checkpoint import CheckpointError, load_checkpoint
    path = path or DEFAULT_CHECKPOINT
    try:
        return load_checkpoint(path)[0]
    except CheckpointError as exc:
        raise CLIError(str(exc)) from exc


def cmd_run(args) -> int:
    import torch
    from .recovery import RecoveryError, read_recovery_points
    from .runner import run_episode, write_episode_logs
    from .scenario import ScenarioError, load_scenario
    torch.set_num_threads(1)
    try:
        sc = load_scenario(args.scenario)
        sc.grid
    except (ScenarioError, MapError) as exc:
        raise CLIError(str(exc)) from exc
    net = _load_net(args.checkpoint) if args.method in ("rl", "rl2") else None
    rps = None
    if args.method == "rl2":
        rp_path = args.recovery_points or sc.recovery_points
        if rp_path is None:
            raise CLIError(f"rl2 needs a recovery-point file; scenario {sc.name!r} names none "
                           f"(pass --recovery-points)")
        try:
            rps = read_recovery_points(rp_path)
        except RecoveryError as exc:
            raise CLIError(str(exc)) from exc
    seed = args.seed if args.seed is not None else sc.seed
    res = run_episode(sc, args.method, seed, net, rps, args.peds)
    out = args.out or Path(".")
    traj = out / f"{sc.name}_{args.method}_s{seed}.csv"
    write_episode_logs(res, traj)
    print(f"outcome={res.outcome.value} t={res.duration:.1f} mean_v={success_velocity(res.record):.3f}")
    log.info("trajectory log %s", traj)
    return EXIT_OK


def cmd_bench(args) -> int:
    import torch
    from .bench import PlanError, jobs_from_env, load_bench_plan, run_bench
    torch.set_num_threads(1)
    try:
        plan = load_bench_plan(args.plan)
        if args.seed is not None:
            plan.seeds = [args.seed + i for i in range(len(plan.seeds))]
        jobs = jobs_from_env(args.jobs)
        out = args.out or Path("bench_out")
        res = run_bench(plan, out, jobs)
    except PlanError as exc:
        raise CLIError(str(exc)) from exc
    for r in res.summary.rows:
        dens = f" density={r.density}" if r.density is not None else ""
        print(f"{r.method:8s} {r.scenario}{dens} trials={r.trials} lost={r.lost:.2f} frozen={r.frozen:.2f} "
              f"success={r.success:.2f} mean_v={r.mean_velocity:.3f} collisions={r.collisions}")
    print(f"wrote {out / 'summary.csv'}")
    return EXIT_OK


COMMANDS = {"map-features": cmd_map_features, "train": cmd_train, "run": cmd_run, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
