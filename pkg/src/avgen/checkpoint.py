"""Versioned binary checkpoints: parameters, Adam moments and step, plus a JSON header."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import ParamTable
from .scorenet import param_shapes
from .training import AdamState

MAGIC = b"AVGC"
VERSION = 1
_HEAD = struct.Struct("<4sII")  # magic, version, header length


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ParamTable, state: AdamState, config: dict, meta: dict) -> None:
    """Header carries the full experiment config so enhancement can rebuild the network."""
    header = json.dumps({"config": config, "meta": meta, "size": int(params.size), "step": int(state.step)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for arr in (params.flat, state.m, state.v):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path):
    """Returns ``(params, state, config_dict, meta)``."""
    from .experiment import ExperimentConfig

    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_HEAD.size : _HEAD.size + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    cfg = ExperimentConfig.from_json(header["config"])
    shapes = param_shapes(cfg.net)
    size = int(header["size"])
    table = ParamTable(shapes, dtype=np.float32)
    if table.size != size:
        raise CheckpointError(f"{path}: header size {size} does not match network ({table.size})")
    body = raw[_HEAD.size + hlen :]
    if len(body) != 3 * 4 * size:
        raise CheckpointError(f"{path}: expected {3 * 4 * size} payload bytes, found {len(body)}")
    arrs = np.frombuffer(body, dtype="<f4").reshape(3, size).astype(np.float32)
    table.flat[...] = arrs[0]
    state = AdamState(arrs[1].copy(), arrs[2].copy(), int(header["step"]))
    return table, state, cfg, header["meta"]
