"""Versioned binary checkpoints: magic, version, JSON manifest, float64 LE blobs."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DSPRCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0
    metrics: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, params, config: dict | None = None, seed: int = 0,
                    metrics: dict | None = None) -> None:
    """``params``: mapping name -> array (a ``Params`` registry works too)."""
    items = params.items() if hasattr(params, "items") else params
    entries, blobs, offset = [], [], 0
    for name, value in items:
        arr = np.asarray(getattr(value, "data", value), dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({
        "params": entries, "config": config or {}, "seed": int(seed), "metrics": metrics or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _HEAD.size + mlen
    try:
        manifest = json.loads(raw[_HEAD.size:start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    params = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + 8 * n > len(raw):
            raise CheckpointError(f"{path}: blob for {e['name']!r} runs past end of file")
        params[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).reshape(e["shape"]).astype(np.float64)
    return Checkpoint(params, manifest["config"], manifest["seed"], manifest["metrics"], version)
