"""Mean-field smoothing of a binary probability map with Gaussian and bilateral kernels."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ..volio import Volume


@dataclass
class CrfParams:
    gaussian_width: float = 1.0
    bilateral_width: float = 1.0
    gaussian_weight: float = 1.0
    bilateral_weight: float = 1.0
    iterations: int = 5
    intensity_width: float = 1.0
    truncate: float = 6.0

    def __post_init__(self):
        if min(self.gaussian_width, self.bilateral_width, self.intensity_width) <= 0:
            raise ValueError("CRF widths must be positive")
        if min(self.gaussian_weight, self.bilateral_weight) < 0:
            raise ValueError("CRF weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def _offsets(shape, radius):
    ranges = [range(-radius, radius + 1) if n > 1 else range(1) for n in shape]
    for off in itertools.product(*ranges):
        if any(off):
            yield off


def _shifted(a: np.ndarray, off):
    """``out[i] = a[i + off]`` with zeros outside, plus the validity mask."""
    out = np.zeros_like(a)
    valid = np.zeros(a.shape, dtype=bool)
    dst, src = [], []
    for o, n in zip(off, a.shape):
        dst.append(slice(max(0, -o), n - max(0, o)))
        src.append(slice(max(0, o), n - max(0, -o)))
    out[tuple(dst)] = a[tuple(src)]
    valid[tuple(dst)] = True
    return out, valid


def _pairwise_weights(ref: np.ndarray, p: CrfParams):
    """Per-offset combined kernel weight maps, self pair excluded."""
    radius = int(math.ceil(p.truncate * max(p.gaussian_width, p.bilateral_width)))
    out = []
    for off in _offsets(ref.shape, radius):
        d2 = float(sum(o * o for o in off))
        g = p.gaussian_weight * math.exp(-d2 / (2 * p.gaussian_width**2))
        ref_s, valid = _shifted(ref, off)
        b = p.bilateral_weight * np.exp(-d2 / (2 * p.bilateral_width**2)
                                        - (ref - ref_s) ** 2 / (2 * p.intensity_width**2))
        w = (g + b) * valid
        if w.max() > 1e-12:
            out.append((off, w))
    return out


def apply_crf(prob: Volume, reference_image: Volume, p: CrfParams | None = None) -> Volume:
    """Binary fully connected CRF, mean-field updates with Potts compatibility.

    Each update sets ``Q(l) ∝ U(l) exp(sum_j k(i, j) Q_j(l))`` where
    ``k = w_g exp(-d²/2σ_g²) + w_b exp(-d²/2σ_b² - ΔI²/2σ_I²)`` over all
    other voxels within the truncation radius. The returned volume is
    ``Q(1)``; with both weights zero the input is returned untouched.
    """
    p = p or CrfParams()
    if prob.dims != reference_image.dims:
        raise ValueError("probability map and reference image must share dims")
    u = prob.data.astype(np.float64)
    if u.min() < 0 or u.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    if (p.gaussian_weight == 0 and p.bilateral_weight == 0) or p.iterations == 0:
        return prob.with_data(prob.data.copy())
    tiny = 1e-12
    logu1 = np.log(np.clip(u, tiny, 1.0))
    logu0 = np.log(np.clip(1.0 - u, tiny, 1.0))
    weights = _pairwise_weights(reference_image.data.astype(np.float64), p)
    q = u.copy()
    for _ in range(p.iterations):
        m1 = np.zeros_like(q)
        m0 = np.zeros_like(q)
        for off, w in weights:
            q_s, _ = _shifted(q, off)
            m1 += w * q_s
            m0 += w * (1.0 - q_s)
        a1 = logu1 + m1
        a0 = logu0 + m0
        q = 1.0 / (1.0 + np.exp(a0 - a1))
    return prob.with_data(np.clip(q, 0.0, 1.0))
