"""Weight initializers for convolution kernels shaped (out, in, *kernel)."""

from __future__ import annotations

import numpy as np


def _fans(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or any(s <= 0 for s in shape):
        raise ValueError(f"degenerate weight shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = _fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_orthogonal(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Flatten to (out, rest) and orthogonalize by QR with diagonal sign fix."""
    _fans(shape)
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q).reshape(shape).astype(np.float32)
