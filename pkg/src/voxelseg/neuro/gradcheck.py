"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .ops import weighted_sum
from .tensor import NonFiniteError, Tensor, no_grad


def grad_check(fn, inputs, params=(), step: float = 1e-3, n_samples: int = 32,
               seed: int = 0, floor: float = 1e-10) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a list of input Tensors to an output Tensor; non-scalar
    outputs are contracted with a fixed random projection. All inputs and
    ``params`` are promoted to float64 for the duration of the check, and
    up to ``n_samples`` coordinates per array are probed.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    params = list(params)
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        out = fn(xs)
        proj = None if out.size == 1 else rng.standard_normal(out.shape)

        def objective(t: Tensor):
            return t if proj is None else weighted_sum(t, proj)

        obj = objective(out)
        if not np.isfinite(obj.data).all():
            raise NonFiniteError("objective is not finite")
        obj.backward()
        targets = [t for t in xs] + [p for p in params if p.trainable]
        worst = 0.0
        for t in targets:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            picks = np.arange(flat.size) if flat.size <= n_samples else rng.choice(flat.size, n_samples, replace=False)
            for i in picks:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + step
                    fp = float(objective(fn(xs)).data)
                    flat[i] = orig - step
                    fm = float(objective(fn(xs)).data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                if not np.isfinite(numeric):
                    raise NonFiniteError("finite difference is not finite")
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
        return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
