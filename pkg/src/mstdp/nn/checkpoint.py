"""Checkpoint file: a magic line, one JSON header line, then raw little-endian float64 values.

The header lists each parameter's name, shape and element offset, echoes
the model config and carries free-form metadata.
"""
from __future__ import annotations

import json

import numpy as np

from ..io import atomic_write_bytes
from .params import ParameterStore

MAGIC = b"MSTDP-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParameterStore, config: dict, meta: dict = None) -> None:
    table, offset, chunks = [], 0, []
    for name, p in store.items():
        table.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += p.data.size
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = {"version": VERSION, "config": config, "meta": meta or {}, "params": table, "n_values": offset}
    blob = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(chunks)
    atomic_write_bytes(path, blob)


def read_checkpoint(path) -> tuple:
    """Return ``(config, meta, state)`` where ``state`` maps parameter names to arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    values = np.frombuffer(blob[end + 1:], dtype="<f8")
    if values.size != header["n_values"]:
        raise CheckpointError(f"{path}: expected {header['n_values']} values, found {values.size}")
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = values[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    return header["config"], header["meta"], state
