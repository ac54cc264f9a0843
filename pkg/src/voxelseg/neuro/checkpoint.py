"""Single-file parameter checkpoints.

Layout: magic ``VXSGCKP1``, a little-endian uint32 header length, a UTF-8
JSON header listing ``(name, shape, trainable)`` in graph order, then each
parameter as little-endian binary32 in the same order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VXSGCKP1"


class CheckpointError(ValueError):
    pass


def save_parameters(params, path) -> None:
    header = [{"name": p.name, "shape": list(p.shape), "trainable": bool(p.trainable)} for p in params]
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_parameters(path) -> list:
    """Return ``[(name, array, trainable), ...]`` in stored order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n])
    off = 12 + n
    out = []
    for h in header:
        count = int(np.prod(h["shape"])) if h["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(h["shape"])
        off += 4 * count
        out.append((h["name"], arr.astype(np.float32), h["trainable"]))
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out
