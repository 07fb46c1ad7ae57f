"""Actor-critic network and the observation it consumes."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from ..simworld import MAX_RANGE, N_BEAMS, wrap_angle

GOAL_CLIP = 6.0
LOG_2PI = math.log(2 * math.pi)


@dataclass
class Observation:
    scans: np.ndarray  # (n_stack, n_beams), ranges / max_range
    vel: np.ndarray  # (2,) v, w
    goal: np.ndarray  # (2,) clipped-normalized distance, bearing

    def __post_init__(self):
        for name in ("scans", "vel", "goal"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite observation field {name!r}")
            setattr(self, name, arr)


def goal_features(goal_xy, pose, clip: float = GOAL_CLIP) -> np.ndarray:
    """(distance clipped to ``clip`` and divided by it, bearing in the robot frame)."""
    dx, dy = goal_xy[0] - pose[0], goal_xy[1] - pose[1]
    dist = math.hypot(dx, dy)
    bearing = float(wrap_angle(math.atan2(dy, dx) - pose[2])) if dist > 1e-9 else 0.0
    if bearing <= -math.pi:
        bearing += 2 * math.pi
    return np.array([min(dist, clip) / clip, bearing], dtype=np.float32)


class ScanStack:
    """Rolling window of the most recent normalized scans (oldest first)."""

    def __init__(self, n_stack: int = 3, max_range: float = MAX_RANGE):
        self.n_stack = n_stack
        self.max_range = max_range
        self._scans: deque = deque(maxlen=n_stack)

    def push(self, ranges) -> None:
        r = np.clip(np.asarray(ranges, dtype=np.float32) / self.max_range, 0.0, 1.0)
        if not self._scans:
            for _ in range(self.n_stack - 1):
                self._scans.append(r)
        self._scans.append(r)

    def array(self) -> np.ndarray:
        return np.stack(self._scans)

    def clear(self) -> None:
        self._scans.clear()


def make_observation(scan_stack: np.ndarray, vel, goal_xy, pose) -> Observation:
    return Observation(scan_stack, np.asarray(vel, dtype=np.float32), goal_features(goal_xy, pose))


@dataclass
class NetConfig:
    n_beams: int = N_BEAMS
    n_stack: int = 3
    conv: list = field(default_factory=lambda: [[32, 5, 2], [32, 3, 2]])  # channels, kernel, stride
    hidden: list = field(default_factory=lambda: [256, 128])
    log_std_init: float = -0.7
    v_bias_init: float = 0.5


class ActorCriticNet(nn.Module):
    """Circular 1-D convolutions over the scan stack, then a shared tanh trunk.

    Needs at least one hidden width; the velocity and goal features enter
    after the first one.

    The actor head outputs the Gaussian mean of (v, w) before clamping and a
    state-independent log-std; the critic head outputs V(s).
    """

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        convs = []
        ch, length = cfg.n_stack, cfg.n_beams
        for out_ch, k, s in cfg.conv:
            convs.append(nn.Conv1d(ch, out_ch, k, stride=s, padding=k // 2, padding_mode="circular"))
            convs.append(nn.Tanh())
            ch = out_ch
            length = (length + 2 * (k // 2) - k) // s + 1
        self.conv = nn.Sequential(*convs)
        # the first dense layer sees scan features only; (v, w) and the goal
        # join before the second, so they are not drowned out by the scan
        self.scan_fc = nn.Sequential(nn.Linear(ch * length, cfg.hidden[0]), nn.Tanh())
        layers = []
        width = cfg.hidden[0] + 4
        for h in cfg.hidden[1:]:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.mu = nn.Linear(width, 2)
        self.log_std = nn.Parameter(torch.full((2,), float(cfg.log_std_init)))
        self.value = nn.Linear(width, 1)
        nn.init.orthogonal_(self.mu.weight, 0.01)
        nn.init.zeros_(self.mu.bias)
        with torch.no_grad():
            self.mu.bias[0] = cfg.v_bias_init
        nn.init.orthogonal_(self.value.weight, 1.0)
        nn.init.zeros_(self.value.bias)

    def forward(self, scans: torch.Tensor, vel: torch.Tensor, goal: torch.Tensor):
        z = self.scan_fc(self.conv(scans).flatten(1))
        h = self.trunk(torch.cat([z, vel, goal], dim=1))
        return self.mu(h), self.log_std.expand(h.shape[0], 2), self.value(h).squeeze(-1)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def obs_to_tensors(obs: Observation | list[Observation], dtype=torch.float32):
    if isinstance(obs, Observation):
        obs = [obs]
    scans = torch.as_tensor(np.stack([o.scans for o in obs]), dtype=dtype)
    vel = torch.as_tensor(np.stack([o.vel for o in obs]), dtype=dtype)
    goal = torch.as_tensor(np.stack([o.goal for o in obs]), dtype=dtype)
    return scans, vel, goal


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


@torch.no_grad()
def forward(net: ActorCriticNet, obs: Observation):
    """(action mean, action log-std, value) for one observation as numpy/float."""
    mu, log_std, v = net(*obs_to_tensors(obs, _dtype(net)))
    return mu[0].detach().double().numpy(), log_std[0].detach().double().numpy(), float(v[0])


def gaussian_log_prob(x, mean, log_std):
    """Diagonal Gaussian log-density summed over the last axis (numpy or torch)."""
    if isinstance(x, torch.Tensor):
        z = (x - mean) / torch.exp(log_std)
        return (-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI).sum(-1)
    z = (np.asarray(x) - mean) / np.exp(log_std)
    return float(np.sum(-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI))


def clamp_action(raw, v_max: float = 1.0, w_max: float = math.pi / 2) -> np.ndarray:
    return np.array([min(max(raw[0], 0.0), v_max), min(max(raw[1], -w_max), w_max)])


def sample_action(net: ActorCriticNet, obs: Observation, rng: np.random.Generator,
                  v_max: float = 1.0, w_max: float = math.pi / 2, deterministic: bool = False):
    """Return (clamped action, log-prob of the pre-clamp sample, pre-clamp sample)."""
    mean, log_std, _ = forward(net, obs)
    raw = mean.copy() if deterministic else mean + np.exp(log_std) * rng.standard_normal(2)
    return clamp_action(raw, v_max, w_max), gaussian_log_prob(raw, mean, log_std), raw


@torch.no_grad()
def value_of_goal(net: ActorCriticNet, scan_stack: np.ndarray, vel, goal_point, pose) -> float:
    """Critic value with ``goal_point`` substituted as the goal, seen from ``pose``."""
    obs = make_observation(scan_stack, vel, goal_point, pose)
    return forward(net, obs)[2]


@torch.no_grad()
def values_of_goals(net: ActorCriticNet, scan_stack: np.ndarray, vel, goal_points, pose) -> np.ndarray:
    """Batched :func:`value_of_goal` over several goal points."""
    obs = [make_observation(scan_stack, vel, g, pose) for g in goal_points]
    if not obs:
        return np.zeros(0)
    return net(*obs_to_tensors(obs, _dtype(net)))[2].double().numpy()


def net_config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
