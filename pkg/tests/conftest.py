import heapq
import math
import re

import numpy as np
import pytest

from crowdnav.gridmap import CellState, OccupancyGrid


def make_grid(rows, resolution=1.0, origin=(0.0, 0.0)):
    """Grid from strings, top row = max y; '#' occupied, '?' unknown, anything else free."""
    lut = {"#": CellState.OCCUPIED, "?": CellState.UNKNOWN}
    cells = np.array([[lut.get(ch, CellState.FREE) for ch in r] for r in rows], dtype=np.uint8)[::-1]
    return OccupancyGrid(cells, resolution, origin)


def boxed_room(w_cells, h_cells, resolution=0.1, wall=2):
    cells = np.zeros((h_cells + 2 * wall, w_cells + 2 * wall), dtype=np.uint8)
    cells[:wall] = cells[-wall:] = CellState.OCCUPIED
    cells[:, :wall] = cells[:, -wall:] = CellState.OCCUPIED
    return OccupancyGrid(cells, resolution, (0.0, 0.0))


def dijkstra_oracle(passable, start, goal, res):
    """Plain heap Dijkstra over 8 neighbours; diagonals need both side cells open."""
    h, w = passable.shape
    dist = {start: 0.0}
    pq = [(0.0, start)]
    while pq:
        d, (y, x) = heapq.heappop(pq)
        if (y, x) == goal:
            return d
        if d > dist[(y, x)]:
            continue
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == dx == 0:
                    continue
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or not passable[ny, nx]:
                    continue
                if dy and dx and not (passable[y, nx] and passable[ny, x]):
                    continue
                nd = d + res * (math.sqrt(2) if dy and dx else 1.0)
                if nd < dist.get((ny, nx), math.inf):
                    dist[(ny, nx)] = nd
                    heapq.heappush(pq, (nd, (ny, nx)))
    return math.inf


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_net(seed=0, double=True):
    """Actor-critic small enough for finite differences (under 10^3 parameters)."""
    import torch
    from crowdnav.policy import ActorCriticNet, NetConfig
    torch.manual_seed(seed)
    net = ActorCriticNet(NetConfig(n_beams=16, n_stack=2, conv=[[2, 3, 2]], hidden=[10, 8]))
    return net.double() if double else net


def random_batch(net, n, seed, spread=0.4):
    """Batch with old log-probs near the current ones so ratios straddle the clip band."""
    import torch
    from crowdnav.policy.network import gaussian_log_prob
    g = torch.Generator().manual_seed(seed)
    dt = next(net.parameters()).dtype
    cfg = net.cfg
    scans = torch.rand(n, cfg.n_stack, cfg.n_beams, generator=g, dtype=dt)
    vel = torch.rand(n, 2, generator=g, dtype=dt)
    goal = torch.rand(n, 2, generator=g, dtype=dt)
    with torch.no_grad():
        mu, log_std, _ = net(scans, vel, goal)
        actions = mu + torch.exp(log_std) * torch.randn(n, 2, generator=g, dtype=dt)
        logp = gaussian_log_prob(actions, mu, log_std)
    adv = torch.randn(n, generator=g, dtype=dt)
    return {"scans": scans, "vel": vel, "goal": goal, "actions": actions,
            "old_logp": logp + spread * torch.randn(n, generator=g, dtype=dt),
            "advantages": (adv - adv.mean()) / adv.std(unbiased=False),
            "returns": torch.randn(n, generator=g, dtype=dt)}


def fd_gradients(net, batch, clip_eps=0.2, value_coef=0.5, entropy_coef=0.01, h=1e-6):
    """Central finite differences of the PPO loss for every parameter entry."""
    import torch
    from crowdnav.policy.ppo import ppo_objective
    out = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            g = np.zeros(tuple(p.shape))
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = ppo_objective(net, batch, clip_eps, value_coef, entropy_coef)[0].item()
                flat[i] = orig - h
                dn = ppo_objective(net, batch, clip_eps, value_coef, entropy_coef)[0].item()
                flat[i] = orig
                g.reshape(-1)[i] = (up - dn) / (2 * h)
            out[name] = g
    return out


# --------------------------------------------------------------------------
# Acceptance report: one line per criterion at the end of the run
# --------------------------------------------------------------------------

ACCEPTANCE_DETAIL: dict[str, str] = {}


def record_detail(criterion: str, text: str) -> None:
    ACCEPTANCE_DETAIL[criterion] = text


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_(A\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or outcome != "passed"):
                rows[m.group(1)] = (outcome, m.group(2).replace("_", " "))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for crit in sorted(rows, key=lambda c: int(c[1:])):
        outcome, title = rows[crit]
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        detail = ACCEPTANCE_DETAIL.get(crit, "")
        terminalreporter.write_line(f"{crit:<4} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
