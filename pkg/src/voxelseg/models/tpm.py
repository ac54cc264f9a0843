"""Tissue probability map: voxelwise lesion frequency over training masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class TissueProbabilityMap:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.size == 0 or self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("TPM values must lie in [0, 1]")

    def patch(self, center, size) -> np.ndarray:
        """Prior values around ``center``; outside the frame reads as 0."""
        out = np.zeros(size)
        src, dst = [], []
        for c, s, n in zip(center, size, self.data.shape):
            lo = c - s // 2
            a, b = max(lo, 0), min(lo + s, n)
            if b <= a:
                return out
            src.append(slice(a, b))
            dst.append(slice(a - lo, b - lo))
        out[tuple(dst)] = self.data[tuple(src)]
        return out


def center_of_mass_align(mask: np.ndarray, frame_shape) -> np.ndarray:
    """Shift a binary mask so its centre of mass sits at the frame centre.

    Integer shifts only; this stands in for rigid registration.
    """
    m = np.asarray(mask, dtype=bool)
    out = np.zeros(frame_shape, dtype=bool)
    if not m.any():
        return out
    com = np.rint(ndimage.center_of_mass(m)).astype(int)
    target = np.array(frame_shape) // 2
    idx = np.argwhere(m) - com + target
    keep = np.all((idx >= 0) & (idx < np.array(frame_shape)), axis=1)
    idx = idx[keep]
    out[tuple(idx.T)] = True
    return out


def build_tpm(masks, align: bool = False, frame_shape=None) -> TissueProbabilityMap:
    """Voxelwise mean of binary masks, optionally centre-of-mass aligned first."""
    masks = list(masks)
    if not masks:
        raise ValueError("build_tpm needs at least one mask")
    arrays = [np.asarray(getattr(m, "data", m)).astype(bool) for m in masks]
    if align:
        shape = tuple(frame_shape or arrays[0].shape)
        arrays = [center_of_mass_align(a, shape) for a in arrays]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"masks disagree on frame: {shapes}")
    count = np.sum(arrays, axis=0, dtype=np.int64)
    return TissueProbabilityMap(count / len(arrays))
