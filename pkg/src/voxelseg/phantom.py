"""Deterministic synthetic breast exams with lesions, BPE and virtual raters.

Every exam is a pure function of its :class:`PhantomSpec`. Geometry is in
voxels of a sagittal stack: rows run superior-inferior, columns run from
the nipple (col 0) to the chest wall, slices run left-right.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volio import ExamBundle, SegmentationMask, Volume, write_exam, write_mask

TIMES_MIN = (1.0, 2.5, 4.0)
PROMINENT_BPE = 0.75

# per-scanner (gain, gamma): raw = gain * signal ** gamma
SCANNERS = {
    "scanner_a": (800.0, 1.0),
    "scanner_b": (450.0, 1.3),
    "scanner_c": (1200.0, 0.8),
}


class InfeasibleSpecError(ValueError):
    pass


class PerturbationError(ValueError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple = (12, 64, 64)
    spacing: tuple = (3.0, 1.0, 1.0)
    lesion_count: int = 1
    lesion_radius_range: tuple = (3.0, 7.0)
    bpe_level: float = 0.3
    noise_sigma: float = 0.02
    # (lesion washout, parenchyma persistent) late slopes, fraction of initial uptake per min
    uptake_rates: tuple = (0.15, 0.12)
    lesion_uptake: float = 1.2
    parenchyma_uptake: float = 0.5
    # lesions match parenchyma at the first post-contrast time and differ only by washout
    washout_defined: bool = False
    scanner_id: str = "scanner_a"
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing = tuple(float(v) for v in self.spacing)
        self.lesion_radius_range = tuple(float(v) for v in self.lesion_radius_range)
        self.uptake_rates = tuple(float(v) for v in self.uptake_rates)
        if not 0 <= self.lesion_count <= 3:
            raise InfeasibleSpecError("lesion_count must be in 0..3")
        if not 0 <= self.bpe_level <= 1:
            raise InfeasibleSpecError("bpe_level must be in [0, 1]")
        if min(self.uptake_rates) < 0 or self.lesion_uptake < 0 or self.parenchyma_uptake < 0:
            raise InfeasibleSpecError("uptake rates must be non-negative")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise InfeasibleSpecError("lesion radius range must satisfy 0 < lo <= hi")
        if hi > 0.2 * min(self.dims[1:]):
            raise InfeasibleSpecError("lesion radius does not fit inside the breast")
        if min(self.dims) < 4 or self.noise_sigma < 0:
            raise InfeasibleSpecError("dims must be >= 4 and noise_sigma >= 0")
        if self.scanner_id not in SCANNERS:
            raise InfeasibleSpecError(f"unknown scanner {self.scanner_id!r}")


@dataclass
class VirtualRadiologistSpec:
    dilation_erosion_range: tuple = (-1, 1)
    boundary_jitter_probability: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = (int(v) for v in self.dilation_erosion_range)
        if lo > hi or max(abs(lo), abs(hi)) > 3:
            raise ValueError("dilation/erosion range must be ordered and within [-3, 3]")
        if not 0 <= self.boundary_jitter_probability <= 1:
            raise ValueError("jitter probability must be in [0, 1]")
        self.dilation_erosion_range = (lo, hi)


def _grid(dims, spacing):
    """Physical coordinates (mm) of voxel centres, one array per axis."""
    return np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing="ij")


def _band_noise(rng, dims, sigma_vox) -> np.ndarray:
    """Smoothed white noise rescaled to zero mean and unit std."""
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma_vox, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def breast_region(dims, spacing) -> tuple:
    """Half-ellipsoid breast mask and a chest-wall slab behind it."""
    z, y, x = _grid(dims, spacing)
    ext = [n * s for n, s in zip(dims, spacing)]
    cz, cy = ext[0] / 2.0, ext[1] / 2.0
    wall = 0.8 * ext[2]
    az, ay, ax = 0.48 * ext[0], 0.44 * ext[1], 0.78 * ext[2]
    r = ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - wall) / ax) ** 2
    breast = (r <= 1.0) & (x < wall)
    chest = (x >= wall + 2 * spacing[2]) & (np.abs(y - cy) < 0.48 * ext[1])
    return breast, chest


def _lesion(rng, breast_core, spec, spacing) -> np.ndarray:
    dims = breast_core.shape
    cand = np.argwhere(breast_core)
    center = cand[rng.integers(len(cand))].astype(float) * np.array(spacing)
    z, y, x = _grid(dims, spacing)
    blob = np.zeros(dims)
    lo, hi = spec.lesion_radius_range
    for _ in range(int(rng.integers(1, 5))):
        radii = rng.uniform(lo, hi, size=3)
        c = center + rng.normal(0, lo / 2, size=3)
        blob = np.maximum(blob, 1.0 - (((z - c[0]) / radii[0]) ** 2 + ((y - c[1]) / radii[1]) ** 2
                                       + ((x - c[2]) / radii[2]) ** 2))
    blob = ndimage.gaussian_filter(blob, (0.5, 1.0, 1.0))
    mask = blob > 0.15
    lab, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum(mask, lab, range(1, n + 1))
        mask = lab == (1 + int(np.argmax(sizes)))
    return mask


def generate_exam(spec: PhantomSpec) -> tuple:
    """Return ``(ExamBundle, ground_truth, breast_mask)`` for ``spec``.

    Signal model per tissue, before scanner response and noise:
    ``S(t) = T1 + A * (1 + r * (t - 1))`` for post-contrast times ``t``,
    with washout lesions (``r < 0``), persistently enhancing parenchyma
    scaled by BPE texture (``r > 0``) and nearly flat fat.
    """
    rng = np.random.default_rng(spec.seed)
    dims, spacing = spec.dims, spec.spacing
    breast, chest = breast_region(dims, spacing)
    smooth = (0.7, 2.5, 2.5)
    gland = _band_noise(rng, dims, smooth) > 0.25
    gland &= breast
    texture = np.clip(1.0 + 0.35 * _band_noise(rng, dims, (1.0, 4.0, 4.0)), 0.3, 1.7)
    core = ndimage.binary_erosion(breast, iterations=int(math.ceil(spec.lesion_radius_range[1])) // 2 + 1)
    core[:1] = core[-1:] = False
    if spec.lesion_count and not core.any():
        raise InfeasibleSpecError("breast too small to host a lesion")
    lesion = np.zeros(dims, dtype=bool)
    for _ in range(spec.lesion_count):
        lesion |= _lesion(rng, core, spec, spacing)
    lesion &= breast

    t1 = np.full(dims, 0.03)
    t1[chest] = 0.45
    t1[breast] = 1.0
    t1[gland] = 0.55
    t2 = np.full(dims, 0.03)
    t2[chest] = 0.35
    t2[breast] = 0.8
    t2[gland] = 0.5

    amp = np.zeros(dims)
    rate = np.zeros(dims)
    amp[breast] = 0.03
    amp[chest] = 0.15
    amp[gland] = spec.parenchyma_uptake * spec.bpe_level * 2.0 * texture[gland]
    rate[gland] = spec.uptake_rates[1]
    lesion_amp = spec.lesion_uptake
    if spec.washout_defined:
        lesion_amp = spec.parenchyma_uptake * spec.bpe_level * 2.0
        t1[lesion] = 0.55
    else:
        t1[lesion] = 0.6
    amp[lesion] = lesion_amp * np.clip(texture[lesion], 0.8, 1.2)
    rate[lesion] = -spec.uptake_rates[0]
    t2[lesion] = 0.7

    gain, gamma = SCANNERS[spec.scanner_id]

    def acquire(signal):
        noisy = signal + rng.normal(0.0, spec.noise_sigma, dims)
        return Volume(gain * np.clip(noisy, 1e-3, None) ** gamma, spacing)

    t1_vol = acquire(t1)
    posts = [(acquire(t1 + amp * (1.0 + rate * (t - 1.0))), t) for t in TIMES_MIN]
    t2_vol = acquire(t2)
    laterality = "left" if rng.random() < 0.5 else "right"
    exam = ExamBundle(t1_vol, posts, t2_vol, spec.scanner_id, laterality, f"phantom-{spec.seed}")
    return exam, SegmentationMask(lesion.astype(np.uint8)), SegmentationMask(breast.astype(np.uint8))


def evaluation_slice(gt: SegmentationMask) -> int:
    """Slice with the largest lesion cross-section (lowest index on ties)."""
    areas = gt.data.reshape(gt.dims[0], -1).sum(axis=1)
    return int(np.argmax(areas))


def slice_mask(mask: SegmentationMask, k: int, source: str | None = None) -> SegmentationMask:
    data = np.zeros_like(mask.data)
    data[k] = mask.data[k]
    return SegmentationMask(data, k, source or mask.source)


def perturb_segmentation(mask: SegmentationMask, spec: VirtualRadiologistSpec,
                         rater_id: str = "virtual") -> SegmentationMask:
    """Dilate or erode by a random radius, then flip boundary voxels at random.

    2D masks are perturbed in their own slice with a 3x3 square element;
    3D masks with a 3x3x3 cube.
    """
    data = mask.data.astype(bool)
    if not data.any():
        raise PerturbationError("cannot perturb an empty mask")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.dilation_erosion_range
    r = int(rng.integers(lo, hi + 1))
    plane = mask.slice_index is not None
    work = data[mask.slice_index] if plane else data
    struct = np.ones((3,) * work.ndim, dtype=bool)
    if r > 0:
        out = ndimage.binary_dilation(work, struct, iterations=r)
    elif r < 0:
        out = ndimage.binary_erosion(work, struct, iterations=-r)
    else:
        out = work.copy()
    p = spec.boundary_jitter_probability
    if p > 0:
        inner = out & ~ndimage.binary_erosion(out, struct)
        outer = ndimage.binary_dilation(out, struct) & ~out
        flip = (inner | outer) & (rng.random(out.shape) < p)
        out = out ^ flip
    if not out.any():
        raise PerturbationError("perturbation emptied the mask")
    full = np.zeros_like(data)
    if plane:
        full[mask.slice_index] = out
    else:
        full = out
    inter = np.logical_and(full, data).sum()
    if 2.0 * inter / (full.sum() + data.sum()) < 0.5:
        raise PerturbationError("perturbation moved Dice below 0.5")
    return SegmentationMask(full.astype(np.uint8), mask.slice_index, f"radiologist:{rater_id}")


def _split_counts(n: int, val_fraction: float, test_fraction: float) -> tuple:
    n_test = int(math.floor(n * test_fraction + 1e-9))
    n_val = int(math.floor(n * val_fraction + 1e-9))
    if n_test + n_val > n:
        raise ValueError("partition fractions exceed the number of exams")
    return n - n_val - n_test, n_val, n_test


@dataclass
class DatasetConfig:
    dims: tuple = (12, 64, 64)
    spacing: tuple = (3.0, 1.0, 1.0)
    val_fraction: float = 0.2
    test_fraction: float = 0.0
    n_raters: int = 4
    rater_range: tuple = (-1, 1)
    rater_jitter: float = 0.1
    washout_defined: bool = False
    scanners: tuple = tuple(SCANNERS)
    # per-exam draw ranges; bpe_range None means (0.6, 1) for washout-defined sets, else (0, 1)
    noise_range: tuple = (0.01, 0.04)
    lesion_uptake_range: tuple = (0.7, 1.4)
    bpe_range: tuple | None = None
    extra: dict = field(default_factory=dict)


def _draw_spec(rng, malignant: bool, cfg: DatasetConfig, seed: int) -> PhantomSpec:
    bpe_range = cfg.bpe_range or ((0.6, 1.0) if cfg.washout_defined else (0.0, 1.0))
    bpe = float(rng.uniform(*bpe_range))
    kw = dict(
        dims=cfg.dims,
        spacing=cfg.spacing,
        lesion_count=int(rng.integers(1, 3)) if malignant else 0,
        bpe_level=bpe,
        noise_sigma=float(rng.uniform(*cfg.noise_range)),
        uptake_rates=(float(rng.uniform(0.1, 0.25)), float(rng.uniform(0.05, 0.2))),
        lesion_uptake=float(rng.uniform(*cfg.lesion_uptake_range)),
        washout_defined=cfg.washout_defined,
        scanner_id=str(cfg.scanners[int(rng.integers(len(cfg.scanners)))]),
        seed=seed,
    )
    kw.update(cfg.extra)
    return PhantomSpec(**kw)


def generate_dataset(n_malignant: int, n_benign: int, seed: int, out_dir, cfg: DatasetConfig | None = None) -> dict:
    """Write exam bundles, masks, virtual-rater masks and ``manifest.json``.

    Partitions are assigned per class: ``floor(n * test_fraction)`` test
    exams, ``floor(n * val_fraction)`` validation exams, the rest training.
    """
    if n_malignant < 0 or n_benign < 0:
        raise ValueError("exam counts must be >= 0")
    cfg = cfg or DatasetConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_malignant + n_benign)
    entries = []
    for label, n, offset in (("malignant", n_malignant, 0), ("benign", n_benign, n_malignant)):
        n_train, n_val, n_test = _split_counts(n, cfg.val_fraction, cfg.test_fraction)
        parts = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        for i in range(n):
            ss = children[offset + i]
            exam_seed = int(ss.generate_state(1)[0])
            rng = np.random.default_rng(ss)
            spec = _draw_spec(rng, label == "malignant", cfg, exam_seed)
            exam, gt, breast = generate_exam(spec)
            exam_id = f"{label[0]}{i:03d}"
            exam.exam_id = exam_id
            exam.notes["bpe_level"] = spec.bpe_level
            rel = Path("exams") / exam_id
            write_exam(exam, out / rel)
            write_mask(gt, out / rel / "gt")
            write_mask(breast, out / rel / "breast")
            entry = {
                "exam_id": exam_id,
                "path": str(rel),
                "label": label,
                "partition": parts[i],
                "scanner_id": spec.scanner_id,
                "bpe_level": spec.bpe_level,
                "prominent_bpe": spec.bpe_level >= PROMINENT_BPE,
                "slice_index": None,
                "raters": [],
            }
            if label == "malignant":
                k = evaluation_slice(gt)
                entry["slice_index"] = k
                ref = slice_mask(gt, k)
                raters = []
                for r in range(cfg.n_raters):
                    vspec = VirtualRadiologistSpec(cfg.rater_range, cfg.rater_jitter, exam_seed + 7919 * (r + 1))
                    m = _perturb_retry(ref, vspec, f"R{r + 1}")
                    write_mask(m, out / rel / f"rater_R{r + 1}")
                    raters.append(f"R{r + 1}")
                entry["raters"] = raters
            entries.append(entry)
    manifest = {
        "seed": seed,
        "n_malignant": n_malignant,
        "n_benign": n_benign,
        "config": {k: v for k, v in asdict(cfg).items()},
        "exams": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=list))
    return manifest


def _perturb_retry(ref: SegmentationMask, spec: VirtualRadiologistSpec, rater_id: str) -> SegmentationMask:
    """Small lesions can vanish under erosion; fall back to milder radii."""
    for attempt in range(8):
        try:
            return perturb_segmentation(ref, replace(spec, seed=spec.seed + attempt), rater_id)
        except PerturbationError:
            continue
    lo, hi = spec.dilation_erosion_range
    return perturb_segmentation(ref, replace(spec, dilation_erosion_range=(max(lo, 0), max(hi, 0))), rater_id)


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    m = json.loads(p.read_text())
    m["root"] = str(p.parent)
    return m
