"""Versioned binary checkpoint.

Layout (all integers little-endian)::

    8 bytes   magic  b"CNAVCKPT"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header: net config, train config, step count, tensor list
    ...       float32 little-endian parameters, concatenated in tensor-list order
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .network import ActorCriticNet, NetConfig, net_config_dict

MAGIC = b"CNAVCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, net: ActorCriticNet, train_config: dict | None = None,
                    steps: int = 0) -> None:
    state = net.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "net_config": net_config_dict(net.cfg),
        "train_config": train_config or {},
        "steps": int(steps),
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for t in tensors:
            arr = state[t["name"]].detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[ActorCriticNet, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        net = ActorCriticNet(NetConfig(**header["net_config"]))
        offset = 16 + hlen
        state = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
            offset += 4 * n
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    net.load_state_dict(state)
    net.eval()
    return net, header
