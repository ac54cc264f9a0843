"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One Adam update of every trainable parameter in ``params``.

    Moments live in float64 keyed by parameter name; frozen parameters are
    skipped entirely, so their data is never rewritten.
    """
    trainable = [p for p in params if p.trainable]
    missing = [p.name for p in trainable if p.grad is None]
    if missing:
        raise MissingGradError(f"no gradient for {missing[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in trainable:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[p.name] + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        if lr == 0:
            continue
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - upd).astype(p.data.dtype)
