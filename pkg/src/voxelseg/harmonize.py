"""Resolution, intensity and contrast-dynamics harmonization.

Turns a raw :class:`~voxelseg.volio.ExamBundle` into network input
channels: in-plane x2 upsampling for low-resolution exams, exam-wise
scaling by the 95th percentile of T1 (or a per-scanner quantile map onto a
chi-square(4) target), then the initial uptake and washout-slope images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .volio import ExamBundle, Volume

CHI2_DOF = 4
N_QUANTILES = 4096


class DegenerateExamError(ValueError):
    pass


class DegenerateMapError(ValueError):
    pass


# --- chi-square(4) --------------------------------------------------------


def chi2_4_cdf(x):
    """CDF of the chi-square distribution with 4 degrees of freedom."""
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return 1.0 - np.exp(-x / 2.0) * (1.0 + x / 2.0)


def chi2_4_ppf(p, tol: float = 1e-10):
    """Inverse of :func:`chi2_4_cdf` by bisection, vectorised over ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p >= 1)):
        raise ValueError("probabilities must lie in [0, 1)")
    lo = np.zeros_like(p)
    hi = np.full_like(p, 16.0)
    while np.any(chi2_4_cdf(hi) < p):
        hi = np.where(chi2_4_cdf(hi) < p, hi * 2.0, hi)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = chi2_4_cdf(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# --- resolution -----------------------------------------------------------


def _linear_resize_axis(a: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = a.shape[axis]
    coords = (np.arange(n * factor) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0, n - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (coords - lo).astype(np.float64)
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - w) + np.take(a, hi, axis=axis) * w


def upsample_inplane_x2(v: Volume) -> Volume:
    """Double rows and columns with separable linear interpolation.

    Sample positions follow pixel-centre alignment (output pixel ``i`` sits
    at input coordinate ``(i + 0.5) / 2 - 0.5``) with edge clamping; the
    slice axis is untouched and in-plane spacing is halved.
    """
    data = v.data.astype(np.float64)
    data = _linear_resize_axis(data, 1, 2)
    data = _linear_resize_axis(data, 2, 2)
    s, r, c = v.spacing
    return Volume(data, (s, r / 2.0, c / 2.0))


# --- intensity ------------------------------------------------------------


def t1_p95(t1: Volume) -> float:
    positive = t1.data[t1.data > 0]
    if positive.size == 0:
        raise DegenerateExamError("T1 has no positive voxels")
    return float(np.percentile(positive.astype(np.float64), 95))


def scale_by_t1_p95(exam: ExamBundle) -> ExamBundle:
    """Divide every volume by the 95th percentile of positive T1 voxels."""
    s = t1_p95(exam.t1)
    out = exam.map_volumes(lambda v: v.with_data(v.data.astype(np.float64) / s))
    out.notes["intensity"] = "exam_p95"
    return out


@dataclass
class IntensityMap:
    """Monotone piecewise-linear map from scanner intensities to the target scale."""

    source: np.ndarray
    target: np.ndarray
    scanner_id: str = "unknown"

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.source.shape != self.target.shape or self.source.ndim != 1 or self.source.size < 2:
            raise ValueError("map needs matching 1D knot arrays with at least two knots")
        if np.any(np.diff(self.source) <= 0):
            raise ValueError("source knots must be strictly increasing")
        if np.any(np.diff(self.target) < 0):
            raise ValueError("target knots must be non-decreasing")

    def __call__(self, x):
        return np.interp(x, self.source, self.target)

    def to_csv(self, path) -> None:
        lines = [f"# scanner_id={self.scanner_id}", "source_intensity,target_intensity"]
        lines += [f"{s!r},{t!r}" for s, t in zip(self.source.tolist(), self.target.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "IntensityMap":
        scanner = "unknown"
        src, tgt = [], []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "scanner_id=" in line:
                    scanner = line.split("scanner_id=", 1)[1].strip()
                continue
            if line.startswith("source_intensity"):
                continue
            a, b = line.split(",")
            src.append(float(a))
            tgt.append(float(b))
        return cls(np.array(src), np.array(tgt), scanner)


def fit_scanner_map(volumes: Sequence, scanner_id: str, n_quantiles: int = N_QUANTILES) -> IntensityMap:
    """Quantile-match pooled breast voxels of one scanner onto chi-square(4).

    ``volumes`` is a list of ``(Volume, mask)`` pairs; ``mask`` is a boolean
    array (or SegmentationMask) selecting breast voxels.
    """
    samples = []
    for vol, mask in volumes:
        m = np.asarray(getattr(mask, "data", mask)).astype(bool)
        samples.append(vol.data[m].astype(np.float64))
    pooled = np.concatenate(samples) if samples else np.empty(0)
    if pooled.size == 0:
        raise DegenerateMapError("no voxels selected by the breast masks")
    probs = (np.arange(n_quantiles) + 0.5) / n_quantiles
    src = np.quantile(pooled, probs)
    tgt = chi2_4_ppf(probs)
    # collapse repeated source knots (discrete intensities) to keep the map a function
    uniq, inverse = np.unique(src, return_inverse=True)
    if uniq.size < 2:
        raise DegenerateMapError(f"scanner {scanner_id}: breast intensities are constant")
    tgt = np.bincount(inverse, weights=tgt) / np.bincount(inverse)
    return IntensityMap(uniq, tgt, scanner_id)


def apply_intensity_map(v: Volume, m: IntensityMap) -> Volume:
    return v.with_data(m(v.data.astype(np.float64)))


def apply_scanner_map(exam: ExamBundle, m: IntensityMap) -> ExamBundle:
    out = exam.map_volumes(lambda v: apply_intensity_map(v, m))
    out.notes["intensity"] = f"scanner_map:{m.scanner_id}"
    return out


# --- contrast dynamics ----------------------------------------------------


@dataclass
class DcePair:
    dce_in: Volume
    dce_out: Volume


def compute_dce(exam: ExamBundle) -> DcePair:
    """Initial uptake (first post minus pre) and per-voxel OLS washout slope.

    The slope is fitted over the post-contrast volumes only, against their
    acquisition times in minutes; with a single post volume it is zero.
    """
    first = exam.t1c.data.astype(np.float64)
    dce_in = first - exam.t1.data.astype(np.float64)
    if len(exam.t1c_series) == 1:
        slope = np.zeros_like(first)
    else:
        t = np.asarray(exam.times, dtype=np.float64)
        tc = t - t.mean()
        denom = float(np.sum(tc * tc))
        mean = np.mean([v.data.astype(np.float64) for v, _ in exam.t1c_series], axis=0)
        slope = np.zeros_like(first)
        for (v, _), w in zip(exam.t1c_series, tc):
            slope += w * (v.data.astype(np.float64) - mean)
        slope /= denom
    return DcePair(exam.t1.with_data(dce_in), exam.t1.with_data(slope))


@dataclass
class ModelInput:
    """Ordered network input channels sharing one voxel grid."""

    channels: tuple
    names: tuple = ("t1c", "dce_in", "dce_out")

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.names = tuple(self.names)
        if len(self.channels) != len(self.names):
            raise ValueError("one name per channel required")
        dims = {c.dims for c in self.channels}
        if len(dims) != 1:
            raise ValueError(f"channels disagree on dims: {dims}")

    @property
    def dims(self) -> tuple:
        return self.channels[0].dims

    def array(self) -> np.ndarray:
        """Stack channels into a ``(C, D, H, W)`` float32 array."""
        return np.stack([c.data for c in self.channels]).astype(np.float32)


def make_model_input(exam: ExamBundle, dce: bool = True, use_t2: bool = False) -> ModelInput:
    """Build ``(t1c, dce_in, dce_out)`` channels from an intensity-scaled exam.

    ``dce=False`` keeps only T1c; ``use_t2`` appends the T2 volume.
    """
    chans = [exam.t1c]
    names = ["t1c"]
    if dce:
        pair = compute_dce(exam)
        chans += [pair.dce_in, pair.dce_out]
        names += ["dce_in", "dce_out"]
    if use_t2:
        if exam.t2 is None:
            raise ValueError(f"exam {exam.exam_id} has no T2 volume")
        chans.append(exam.t2)
        names.append("t2")
    return ModelInput(tuple(chans), tuple(names))


def harmonize_exam(
    exam: ExamBundle,
    style: str = "exam",
    maps: Optional[dict] = None,
    upsample: bool = False,
) -> ExamBundle:
    """Full preprocessing of one exam.

    ``style`` is ``"exam"`` (T1 p95 scaling), ``"scanner"`` (apply the fitted
    map for ``exam.scanner_id`` from ``maps``) or ``"both"``, in which case
    exam scaling is used. Registration is taken as identity: bundles are
    assumed voxel-aligned, and the output notes record that.
    """
    if style not in ("exam", "scanner", "both"):
        raise ValueError(f"unknown harmonization style {style!r}")
    if upsample:
        exam = exam.map_volumes(upsample_inplane_x2)
    if style in ("exam", "both"):
        out = scale_by_t1_p95(exam)
    else:
        if not maps or exam.scanner_id not in maps:
            raise KeyError(f"no intensity map for scanner {exam.scanner_id!r}")
        out = apply_scanner_map(exam, maps[exam.scanner_id])
    out.notes["registration"] = "identity (voxel-aligned input assumed)"
    return out


def ks_distance_chi2_4(samples) -> float:
    """Kolmogorov-Smirnov distance between ``samples`` and chi-square(4)."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    cdf = chi2_4_cdf(x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(n) / n
    return float(max(upper.max(), lower.max()))

