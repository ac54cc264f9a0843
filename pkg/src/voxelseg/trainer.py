"""Patch sampling, rotation augmentation and the Adam training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .evalstats import dice
from .inference import DEFAULT_REL_THRESHOLD, predict_volume, threshold_slice
from .neuro import AdamState, NonFiniteError, adam_step, generalized_dice_loss, no_grad


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite."""


class ConfigError(ValueError):
    pass


@dataclass
class SamplerConfig:
    tumor_ratio: tuple = (1, 4)
    enrichment_quantile: float = 0.9
    # share of non-tumour draws taken from the bright (enriched) voxels
    enrichment_mix: float = 0.5
    patch_input: tuple = (19, 75, 75)
    output_tile: tuple = (1, 37, 37)
    augment: bool = True
    max_angle_deg: float = 15.0
    rng_seed: int = 2

    def __post_init__(self):
        self.tumor_ratio = tuple(int(v) for v in self.tumor_ratio)
        self.patch_input = tuple(int(v) for v in self.patch_input)
        self.output_tile = tuple(int(v) for v in self.output_tile)
        if len(self.tumor_ratio) != 2 or min(self.tumor_ratio) <= 0:
            raise ConfigError("tumor_ratio parts must be positive")
        if not 0 < self.enrichment_quantile < 1:
            raise ConfigError("enrichment_quantile must lie in (0, 1)")
        if any(p % 2 == 0 for p in self.patch_input):
            raise ConfigError("patch dims must be odd so patches have a centre voxel")

    @property
    def tumor_probability(self) -> float:
        a, b = self.tumor_ratio
        return a / (a + b)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-6
    iterations_per_epoch: int = 2976
    patches_per_epoch: int = 48000
    scans_per_epoch: int = 4800
    max_epochs: int = 100
    patience: int = 5
    init_seed: int = 1
    val_patches: int = 64
    rel_threshold: float = DEFAULT_REL_THRESHOLD

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations_per_epoch < 1 or self.max_epochs < 1:
            raise ConfigError("batch size, iterations and epochs must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        drawn = self.batch_size * self.iterations_per_epoch
        if abs(drawn - self.patches_per_epoch) > 0.02 * self.patches_per_epoch:
            raise ConfigError(
                f"batch_size x iterations = {drawn} differs from patches_per_epoch "
                f"{self.patches_per_epoch} by more than 2%")


@dataclass
class ExamRecord:
    """One harmonized exam held in memory for sampling and validation."""

    exam_id: str
    inputs: np.ndarray  # (C, D, H, W) float32
    breast: np.ndarray  # (D, H, W) bool
    gt: np.ndarray | None = None  # (D, H, W) bool, malignant exams only
    slice_index: int | None = None
    raters: list = field(default_factory=list)
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)
    # (D, H, W) float map for the prior input; the breast mask when None
    prior: np.ndarray | None = None

    @property
    def prior_map(self) -> np.ndarray:
        return self.breast if self.prior is None else self.prior

    @property
    def malignant(self) -> bool:
        return self.gt is not None and bool(self.gt.any())

    @property
    def t1c(self) -> np.ndarray:
        return self.inputs[0]


class PatchDataset:
    """Malignant and benign exams with reflect-padded caches for cropping."""

    def __init__(self, exams, patch_input):
        self.exams = list(exams)
        self.patch_input = tuple(patch_input)
        self.half = tuple(p // 2 for p in self.patch_input)
        self.malignant = [e for e in self.exams if e.malignant]
        self.benign = [e for e in self.exams if not e.malignant]
        self._pad = {}
        self._tumor_index = [np.argwhere(e.gt) for e in self.malignant]
        self._tumor_cum = np.cumsum([len(t) for t in self._tumor_index])
        self._bright = {}
        self._breast = {}

    def padded(self, e: ExamRecord) -> tuple:
        if e.exam_id not in self._pad:
            pw = [(h, h) for h in self.half]
            gt = e.gt if e.gt is not None else np.zeros(e.breast.shape, bool)
            self._pad[e.exam_id] = (
                np.pad(e.inputs, [(0, 0)] + pw, mode="reflect"),
                np.pad(gt, pw, mode="reflect"),
                np.pad(e.prior_map.astype(np.float32), pw, mode="reflect"),
            )
        return self._pad[e.exam_id]

    def bright_voxels(self, e: ExamRecord, q: float) -> np.ndarray:
        key = (e.exam_id, q)
        if key not in self._bright:
            vals = e.t1c[e.breast]
            thr = np.quantile(vals, q)
            cand = np.argwhere(e.breast & (e.t1c > thr))
            if len(cand) == 0:
                cand = np.argwhere(e.breast & (e.t1c >= thr))
            self._bright[key] = cand
        return self._bright[key]

    def breast_voxels(self, e: ExamRecord) -> np.ndarray:
        if e.exam_id not in self._breast:
            self._breast[e.exam_id] = np.argwhere(e.breast)
        return self._breast[e.exam_id]

    def crop(self, e: ExamRecord, center) -> tuple:
        """Input, lesion and prior patches centred on ``center`` (reflect padded)."""
        x, g, b = self.padded(e)
        box = tuple(slice(c, c + p) for c, p in zip(center, self.patch_input))
        return x[(slice(None),) + box].copy(), g[box].copy(), b[box].copy()


def _center_crop(a: np.ndarray, size) -> np.ndarray:
    lead = a.ndim - len(size)
    sl = [slice(None)] * lead
    for n, s in zip(a.shape[lead:], size):
        sl.append(slice((n - s) // 2, (n - s) // 2 + s))
    return a[tuple(sl)]


def sample_center(ds: PatchDataset, cfg: SamplerConfig, rng: np.random.Generator) -> tuple:
    """Pick ``(exam, centre voxel, is_tumor)`` per the tumour ratio and enrichment rule."""
    if not ds.malignant or not ds.benign:
        raise ConfigError("sampling needs at least one malignant and one benign exam")
    if rng.random() < cfg.tumor_probability:
        k = int(rng.integers(ds._tumor_cum[-1]))
        i = int(np.searchsorted(ds._tumor_cum, k, side="right"))
        prev = 0 if i == 0 else ds._tumor_cum[i - 1]
        return ds.malignant[i], tuple(ds._tumor_index[i][k - prev]), True
    e = ds.benign[int(rng.integers(len(ds.benign)))]
    if rng.random() < cfg.enrichment_mix:
        cand = ds.bright_voxels(e, cfg.enrichment_quantile)
    else:
        cand = ds.breast_voxels(e)
    return e, tuple(cand[int(rng.integers(len(cand)))]), False


def augment_rotate(patch: np.ndarray, target: np.ndarray, rng: np.random.Generator,
                   max_angle_deg: float = 15.0, extra=None, angle=None, axis=None) -> tuple:
    """Rotate a ``(C, D, H, W)`` patch and its ``(D, H, W)`` label about one axis.

    The axis is uniform over the three, the angle uniform in
    ``[-max_angle_deg, max_angle_deg]`` (in index space). Images use linear
    interpolation, labels and the ``extra`` map nearest neighbour; borders
    reflect and shapes are preserved.
    """
    if axis is None:
        axis = int(rng.integers(3))
    if angle is None:
        angle = float(rng.uniform(-max_angle_deg, max_angle_deg))
    if angle == 0:
        out = (patch.copy(), target.copy())
        return out + ((extra.copy(),) if extra is not None else ())
    plane = [a for a in range(3) if a != axis]
    img = np.stack([ndimage.rotate(c, angle, axes=plane, reshape=False, order=1, mode="reflect") for c in patch])
    lab = ndimage.rotate(target.astype(np.uint8), angle, axes=plane, reshape=False, order=0, mode="reflect")
    out = (img.astype(patch.dtype), lab.astype(target.dtype))
    if extra is not None:
        ext = ndimage.rotate(extra.astype(np.float32), angle, axes=plane, reshape=False, order=0, mode="reflect")
        out = out + (ext.astype(extra.dtype),)
    return out


def one_hot(labels: np.ndarray, classes: int = 2) -> np.ndarray:
    return np.stack([labels == c for c in range(classes)]).astype(np.float32)


def sample_patch(ds: PatchDataset, cfg: SamplerConfig, rng: np.random.Generator) -> tuple:
    """Return ``(patch, target_onehot, is_tumor, prior)`` for one draw.

    ``target_onehot`` is ``(2, *output_tile)`` and ``prior`` the record's
    prior map over the output tile, shaped ``(1, *output_tile)``.
    """
    e, center, is_tumor = sample_center(ds, cfg, rng)
    x, g, b = ds.crop(e, center)
    if cfg.augment:
        x, g, b = augment_rotate(x, g, rng, cfg.max_angle_deg, extra=b)
    tgt = _center_crop(g, cfg.output_tile).astype(np.int64)
    prior = _center_crop(b, cfg.output_tile).astype(np.float32)[None]
    return x.astype(np.float32), one_hot(tgt), is_tumor, prior


def sample_batch(ds, cfg, rng, n) -> tuple:
    draws = [sample_patch(ds, cfg, rng) for _ in range(n)]
    x = np.stack([d[0] for d in draws])
    t = np.stack([d[1] for d in draws])
    p = np.stack([d[3] for d in draws])
    return x, t, p


@dataclass
class TrainState:
    graph: object
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_val_dice: float = float("nan")
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    best_params: dict | None = None
    history: list = field(default_factory=list)


def _frozen_snapshot(graph) -> dict:
    return {p.name: p.data.copy() for p in graph.parameters() if not p.trainable}


def train_epoch(state: TrainState, ds: PatchDataset, cfg: TrainConfig, sampler: SamplerConfig,
                rng: np.random.Generator) -> float:
    """Run ``iterations_per_epoch`` Adam steps; return the mean training loss."""
    graph = state.graph
    frozen = _frozen_snapshot(graph)
    losses = []
    for it in range(cfg.iterations_per_epoch):
        x, t, p = sample_batch(ds, sampler, rng, cfg.batch_size)
        graph.zero_grad()
        try:
            probs = graph.forward_patch(x, p)
            loss = generalized_dice_loss(probs, t)
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {state.epoch} iteration {it}: {exc}") from exc
        val = float(loss.data)
        if not math.isfinite(val):
            raise TrainingAborted(f"epoch {state.epoch} iteration {it}: loss {val}")
        loss.backward()
        adam_step(graph.parameters(), state.adam, cfg.lr)
        losses.append(val)
    for name, arr in frozen.items():
        if not np.array_equal(arr, graph.param(name).data):
            raise RuntimeError(f"non-trainable parameter {name} changed")
    return float(np.mean(losses))


def fixed_validation_batch(ds: PatchDataset, sampler: SamplerConfig, n: int, seed: int = 12345) -> tuple:
    """Patches drawn once with a fixed seed, without augmentation."""
    cfg = SamplerConfig(**{**sampler.__dict__, "augment": False})
    return sample_batch(ds, cfg, np.random.default_rng(seed), n)


def validation_loss(graph, batch) -> float:
    x, t, p = batch
    with no_grad():
        losses = [float(generalized_dice_loss(graph.forward_patch(x[i : i + 8], p[i : i + 8]), t[i : i + 8]).data)
                  for i in range(0, len(x), 8)]
    return float(np.mean(losses))


def validate(graph, val_set, rel_threshold: float = DEFAULT_REL_THRESHOLD, use_prior: bool = True) -> float:
    """Median 2D Dice of thresholded predictions on each exam's evaluation slice."""
    exams = [e for e in val_set if e.slice_index is not None]
    if not exams:
        raise ConfigError("validation set has no exams with a reference slice")
    scores = []
    for e in exams:
        prob = predict_volume(graph, e.inputs, slices=[e.slice_index], prior=e.prior_map if use_prior else None)
        mask = threshold_slice(prob, e.slice_index, rel_threshold)
        scores.append(dice(mask.slice2d(), e.gt[e.slice_index]))
    return float(np.median(scores))


def early_stop(history, patience: int) -> bool:
    """Halt once validation loss has not improved for ``patience`` epochs."""
    if not history:
        raise ValueError("history is empty")
    losses = [h["val_loss"] for h in history]
    best = int(np.argmin(losses))
    return len(losses) - 1 - best >= patience


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice")


def fit(graph, train: PatchDataset, val_set, cfg: TrainConfig, sampler: SamplerConfig,
        log_path=None, checkpoint_path=None, progress=None) -> TrainState:
    """Train with early stopping; the graph ends holding its best-epoch weights."""
    state = TrainState(graph)
    rng = np.random.default_rng(sampler.rng_seed)
    val_set = list(val_set)
    # validation loss needs non-tumour draws; borrow training benign exams if none are held out
    extra = [] if any(not e.malignant for e in val_set) else train.benign
    val_ds = PatchDataset(val_set + extra, sampler.patch_input)
    val_batch = fixed_validation_batch(val_ds, sampler, cfg.val_patches)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)
    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        tl = train_epoch(state, train, cfg, sampler, rng)
        vl = validation_loss(graph, val_batch)
        vd = validate(graph, val_set, cfg.rel_threshold)
        row = {"epoch": epoch, "train_loss": tl, "val_loss": vl, "val_dice": vd}
        state.history.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as f:
                csv.writer(f).writerow([row[c] for c in LOG_COLUMNS])
        if vl < state.best_val_loss:
            state.best_val_loss, state.best_val_dice, state.best_epoch = vl, vd, epoch
            state.best_params = graph.state_dict()
            if checkpoint_path is not None:
                graph.save(checkpoint_path)
        if progress is not None:
            progress(row)
        if early_stop(state.history, cfg.patience):
            break
    if state.best_params is not None:
        graph.load_state_dict(state.best_params)
    return state
