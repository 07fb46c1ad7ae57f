"""PPO with clipped surrogate, GAE advantages and a shared actor-critic."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from .checkpoint import save_checkpoint
from .env import GoalEnvConfig, GoalReachingEnv
from .network import (ActorCriticNet, NetConfig, Observation, clamp_action, gaussian_log_prob,
                      obs_to_tensors)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("update_idx", "steps", "mean_reward", "success_rate", "policy_loss", "value_loss", "entropy")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at batch index {index}")
        self.index = index


@dataclass
class Stage:
    until: float  # fraction of total_steps at which this stage ends
    env: GoalEnvConfig = field(default_factory=GoalEnvConfig)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 64
    horizon: int = 512
    workers: int = 4
    total_steps: int = 200_000
    seed: int = 0
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    reward_scale: float = 0.1  # rewards are multiplied by this before advantage estimation
    scan_lr_scale: float = 0.1  # lr multiplier for the scan encoder (conv + scan_fc)
    checkpoint_every: int = 20
    eval_episodes: int = 100
    net: NetConfig = field(default_factory=NetConfig)
    curriculum: list[Stage] = field(default_factory=lambda: [Stage(1.0)])

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.clip_eps > 0:
            raise ConfigError(f"clip_eps must be positive, got {self.clip_eps}")
        for name in ("lr", "epochs", "minibatch", "horizon", "workers", "total_steps", "scan_lr_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_steps < self.workers:
            raise ConfigError("total_steps must be at least the number of workers")
        if not self.curriculum:
            raise ConfigError("curriculum needs at least one stage")
        return self

    def stage_at(self, steps: int) -> Stage:
        frac = steps / self.total_steps
        for st in self.curriculum:
            if frac < st.until:
                return st
        return self.curriculum[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d or {})
    net = _build(NetConfig, d.pop("net", {}) or {}, "net")
    stages = []
    for st in d.pop("curriculum", None) or [{"until": 1.0}]:
        st = dict(st)
        env = st.pop("env", {}) or {}
        env = {k: tuple(v) if isinstance(v, list) else v for k, v in env.items()}
        stages.append(Stage(float(st.pop("until")), _build(GoalEnvConfig, env, "curriculum.env")))
        if st:
            raise ConfigError(f"unknown curriculum keys: {sorted(st)}")
    try:
        cfg = _build(TrainConfig, d, "train")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.net, cfg.curriculum = net, stages
    return cfg.validate()


def load_train_config(path: str | os.PathLike) -> TrainConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read train config {path}: {exc}") from exc
    return train_config_from_dict(doc)


# --------------------------------------------------------------------------
# Advantage estimation
# --------------------------------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Backward-recursive GAE; ``dones[t]`` marks that step t ended an episode.

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError(f"length mismatch: rewards {len(rewards)}, values {len(values)}, dones {len(dones)}")
    T = len(rewards)
    adv = np.zeros(T)
    next_value, next_adv = float(last_value), 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------

def normalize_advantages(adv):
    if isinstance(adv, torch.Tensor):
        return (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_objective(net: ActorCriticNet, batch: dict, clip_eps: float, value_coef: float,
                  entropy_coef: float):
    """Differentiable PPO loss and per-term diagnostics.

    ``batch`` holds tensors ``scans, vel, goal, actions`` (pre-clamp samples),
    ``old_logp``, ``advantages`` (already normalized) and ``returns``.
    """
    mu, log_std, value = net(batch["scans"], batch["vel"], batch["goal"])
    logp = gaussian_log_prob(batch["actions"], mu, log_std)
    ratio = torch.exp(logp - batch["old_logp"])
    adv = batch["advantages"]
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * adv)
    vloss = (value - batch["returns"]) ** 2
    per_elem = -surr + value_coef * vloss
    if not torch.isfinite(per_elem).all():
        bad = int(torch.nonzero(~torch.isfinite(per_elem))[0, 0])
        raise NonFiniteLossError(bad)
    entropy = (0.5 + 0.5 * math.log(2 * math.pi) + log_std).sum(-1).mean()
    policy_loss = -surr.mean()
    value_loss = vloss.mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    if not torch.isfinite(loss):
        raise NonFiniteLossError(-1)
    info = {"policy_loss": float(policy_loss.detach()), "value_loss": float(value_loss.detach()), "entropy": float(entropy.detach()),
            "clip_frac": float(((ratio - 1).abs() > clip_eps).float().mean())}
    return loss, info


def ppo_loss(net: ActorCriticNet, batch: dict, clip_eps: float, value_coef: float = 0.5,
             entropy_coef: float = 0.0):
    """Return ``(loss, {param_name: gradient ndarray})`` via reverse-mode differentiation."""
    loss, _ = ppo_objective(net, batch, clip_eps, value_coef, entropy_coef)
    names, params = zip(*[(n, p) for n, p in net.named_parameters()])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {n: (np.zeros(tuple(p.shape)) if g is None else g.detach().double().numpy())
           for n, p, g in zip(names, params, grads)}
    return float(loss.detach()), out


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _batched_policy(net, obs_list):
    with torch.no_grad():
        mu, log_std, v = net(*obs_to_tensors(obs_list))
    return mu.detach().double().numpy(), log_std.detach().double().numpy(), v.detach().double().numpy()


EnvFactory = Callable[[GoalEnvConfig, int], GoalReachingEnv]


def default_env_factory(cfg: GoalEnvConfig, seed: int) -> GoalReachingEnv:
    return GoalReachingEnv(cfg, seed)


def evaluate(net: ActorCriticNet, env_cfg: GoalEnvConfig, episodes: int, seed: int,
             env_factory: EnvFactory = default_env_factory) -> float:
    """Success fraction with deterministic (mean) actions."""
    env = env_factory(env_cfg, seed)
    wins = 0
    for _ in range(episodes):
        obs, done, info = env.reset(), False, {}
        while not done:
            mu, _, _ = _batched_policy(net, [obs])
            obs, _, done, info = env.step(clamp_action(mu[0], env.params.v_max, env.params.w_max))
        wins += bool(info["success"])
    return wins / episodes


@dataclass
class TrainResult:
    net: ActorCriticNet
    log: list[dict]
    steps: int


def write_train_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["update_idx"], r["steps"]] + [f"{r[k]:.6g}" for k in LOG_COLUMNS[2:]])


def make_optimizer(net: ActorCriticNet, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam with a slower learning rate on the wide scan encoder, which otherwise drifts too fast."""
    scan, rest = [], []
    for name, p in net.named_parameters():
        (scan if name.startswith(("conv", "scan_fc")) else rest).append(p)
    return torch.optim.Adam([{"params": scan, "lr": cfg.lr * cfg.scan_lr_scale},
                             {"params": rest, "lr": cfg.lr}], eps=1e-5)


def train(env_factory: EnvFactory, config: TrainConfig, checkpoint_path: str | os.PathLike | None = None,
          log_path: str | os.PathLike | None = None, progress: bool = False,
          init_net: ActorCriticNet | None = None) -> TrainResult:
    """Synchronous PPO: R workers roll out ``horizon`` steps each, then the network is updated."""
    cfg = config.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = init_net if init_net is not None else ActorCriticNet(cfg.net)
    net.float()
    opt = make_optimizer(net, cfg)
    stage = cfg.stage_at(0)
    envs = [env_factory(stage.env, cfg.seed * 1000 + i + 1) for i in range(cfg.workers)]
    obs = [e.reset() for e in envs]
    ep_ret = np.zeros(cfg.workers)
    steps, update_idx = 0, 0
    rows: list[dict] = []
    t0 = time.time()

    def _abort(exc):
        if checkpoint_path:
            save_checkpoint(checkpoint_path, net, cfg.to_dict(), steps)
        if log_path:
            write_train_log(log_path, rows)
        raise exc

    while steps < cfg.total_steps:
        new_stage = cfg.stage_at(steps)
        if new_stage is not stage:
            stage = new_stage
            for e in envs:
                e.cfg = stage.env
            obs = [e.reset() for e in envs]
            ep_ret[:] = 0
        # the final rollout is shortened so the step budget is never exceeded
        R = cfg.workers
        T = min(cfg.horizon, (cfg.total_steps - steps) // R)
        if T == 0:
            break
        buf_obs: list[list[Observation]] = [[] for _ in range(R)]
        acts = np.zeros((R, T, 2))
        logps = np.zeros((R, T))
        vals = np.zeros((R, T))
        rews = np.zeros((R, T))
        dones = np.zeros((R, T), dtype=bool)
        finished_returns, finished_success = [], []
        net.eval()
        for t in range(T):
            mu, log_std, v = _batched_policy(net, obs)
            raw = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
            for i, env in enumerate(envs):
                buf_obs[i].append(obs[i])
                acts[i, t] = raw[i]
                logps[i, t] = gaussian_log_prob(raw[i], mu[i], log_std[i])
                vals[i, t] = v[i]
                nobs, r, done, info = env.step(clamp_action(raw[i], env.params.v_max, env.params.w_max))
                ep_ret[i] += r
                r *= cfg.reward_scale
                if info.get("truncated"):
                    r += cfg.gamma * _batched_policy(net, [nobs])[2][0]
                rews[i, t] = r
                dones[i, t] = done
                if done:
                    finished_returns.append(ep_ret[i])
                    finished_success.append(bool(info["success"]))
                    ep_ret[i] = 0.0
                    nobs = env.reset()
                obs[i] = nobs
        steps += T * R
        last_v = _batched_policy(net, obs)[2]
        adv = np.zeros((R, T))
        ret = np.zeros((R, T))
        for i in range(R):
            adv[i], ret[i] = compute_gae(rews[i], vals[i], dones[i], cfg.gamma, cfg.lam, last_v[i])

        flat_obs = [o for row in buf_obs for o in row]
        scans, vel, goal = obs_to_tensors(flat_obs)
        data = {
            "scans": scans, "vel": vel, "goal": goal,
            "actions": torch.as_tensor(acts.reshape(-1, 2), dtype=torch.float32),
            "old_logp": torch.as_tensor(logps.reshape(-1), dtype=torch.float32),
            "advantages": torch.as_tensor(adv.reshape(-1), dtype=torch.float32),
            "returns": torch.as_tensor(ret.reshape(-1), dtype=torch.float32),
        }
        n = T * R
        net.train()
        stats = {"policy_loss": [], "value_loss": [], "entropy": []}
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for s in range(0, n, cfg.minibatch):
                idx = torch.as_tensor(perm[s:s + cfg.minibatch])
                mb = {k: v[idx] for k, v in data.items()}
                mb["advantages"] = normalize_advantages(mb["advantages"])
                try:
                    loss, info = ppo_objective(net, mb, cfg.clip_eps, cfg.value_coef, cfg.entropy_coef)
                except NonFiniteLossError as exc:
                    _abort(exc)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
                opt.step()
                for k in stats:
                    stats[k].append(info[k])
        update_idx += 1
        row = {
            "update_idx": update_idx, "steps": steps,
            "mean_reward": float(np.mean(finished_returns)) if finished_returns else float("nan"),
            "success_rate": float(np.mean(finished_success)) if finished_success else float("nan"),
            **{k: float(np.mean(v)) for k, v in stats.items()},
        }
        rows.append(row)
        if progress:
            log.info("update %d steps %d reward %.2f success %.2f (%.0fs)", update_idx, steps,
                     row["mean_reward"], row["success_rate"], time.time() - t0)
        if checkpoint_path and update_idx % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, net, cfg.to_dict(), steps)
            if log_path:
                write_train_log(log_path, rows)
    net.eval()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, cfg.to_dict(), steps)
    if log_path:
        write_train_log(log_path, rows)
    return TrainResult(net, rows, steps)
