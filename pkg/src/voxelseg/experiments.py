"""Phantom-scale experiments: end-to-end evaluation, paired ablations and the
training-set size sweep.

All runs use a narrow U-Net on small patches so that one training run takes
a few minutes on one CPU core. Every run is fully determined by its
``RunConfig`` and the dataset on disk.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .evalstats import EvaluationReport, RankTestResult, dice, evaluate_test_set, wilcoxon_signed_rank
from .inference import threshold_plane
from .models import UNet3DConfig, build_unet3d
from .phantom import load_manifest
from .pipeline import fit_maps, load_records, predict_record
from .trainer import PatchDataset, SamplerConfig, TrainConfig, TrainState, fit
from .volio import SegmentationMask

# flag -> (reference value, alternative value)
ABLATIONS = {
    "prior_mask": (True, False),
    "use_t2": (False, True),
    "harmonize": ("exam", "scanner"),
    "crf": (False, True),
    "dce": (True, False),
}


@dataclass(frozen=True)
class RunConfig:
    prior_mask: bool = True
    use_t2: bool = False
    harmonize: str = "exam"
    crf: bool = False
    dce: bool = True
    base_channels: int = 8
    patch: tuple = (3, 43, 43)
    tile: tuple = (1, 21, 21)
    # batch 8 leaves 17% of batches tumour-free, which can saturate the softmax on background
    batch_size: int = 16
    # 1e-3 saturated the softmax on background in 2 of 4 seeds; 3e-4 in none
    lr: float = 3e-4
    iterations: int = 200
    epochs: int = 3
    patience: int = 5
    rel_threshold: float = 0.60
    seed: int = 0
    # cap on training exams per class; None uses the whole train partition
    n_train: int | None = None

    def __post_init__(self):
        if self.harmonize not in ("exam", "scanner"):
            raise ValueError(f"harmonize must be exam or scanner, got {self.harmonize!r}")
        if self.n_train is not None and self.n_train < 1:
            raise ValueError("n_train must be positive")

    @property
    def in_channels(self) -> int:
        return (3 if self.dce else 1) + (1 if self.use_t2 else 0)

    def spec(self) -> dict:
        """Model description in the format written by the ``train`` command."""
        return {"arch": "unet3d", "prior_mask": self.prior_mask, "use_t2": self.use_t2,
                "harmonize": self.harmonize, "crf": self.crf, "dce": self.dce,
                "base_channels": self.base_channels, "patch": list(self.patch), "tile": list(self.tile),
                "rel_threshold": self.rel_threshold, "seed": self.seed}


@dataclass
class TrainedRun:
    config: RunConfig
    graph: object
    state: TrainState
    maps: dict | None = None


def _record_kwargs(cfg: RunConfig, maps) -> dict:
    return dict(style=cfg.harmonize, maps=maps, dce=cfg.dce, use_t2=cfg.use_t2)


def train_run(manifest, cfg: RunConfig, progress=None) -> TrainedRun:
    """Train a U-Net on the train partition with early stopping on val."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    # label-free maps fitted on every exam, as the train command does
    maps = fit_maps(manifest, partitions=None) if cfg.harmonize == "scanner" else None
    kw = _record_kwargs(cfg, maps)
    train = load_records(manifest, "train", **kw)
    if cfg.n_train is not None:
        mal = [r for r in train if r.malignant]
        ben = [r for r in train if not r.malignant]
        if len(mal) < cfg.n_train or len(ben) < cfg.n_train:
            raise ValueError(f"n_train={cfg.n_train} exceeds the train partition ({len(mal)} malignant, "
                             f"{len(ben)} benign)")
        train = mal[: cfg.n_train] + ben[: cfg.n_train]
    val = load_records(manifest, "val", "malignant", **kw)
    graph = build_unet3d(UNet3DConfig(in_channels=cfg.in_channels, base_channels=cfg.base_channels,
                                      input_patch=tuple(cfg.patch), output_tile=tuple(cfg.tile),
                                      prior_channel=cfg.prior_mask, seed=cfg.seed))
    sampler = SamplerConfig(patch_input=graph.input_patch, output_tile=graph.output_tile, rng_seed=cfg.seed + 1)
    tc = TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, iterations_per_epoch=cfg.iterations,
                     patches_per_epoch=cfg.batch_size * cfg.iterations, max_epochs=cfg.epochs,
                     patience=cfg.patience, init_seed=cfg.seed, rel_threshold=cfg.rel_threshold)
    state = fit(graph, PatchDataset(train, sampler.patch_input), val, tc, sampler, progress=progress)
    return TrainedRun(cfg, graph, state, maps)


def predict_partition(run: TrainedRun, manifest, partition: str = "test") -> tuple:
    """Records and probability planes on the evaluation slice of each malignant exam."""
    cfg = run.config
    recs = load_records(manifest, partition, "malignant", **_record_kwargs(cfg, run.maps))
    if not recs:
        raise ValueError(f"no malignant exams in partition {partition!r}")
    planes = {}
    for r in recs:
        prob, _, k = predict_record(cfg.spec(), run.graph, r, r.breast if cfg.prior_mask else None, r.slice_index,
                                    cfg.rel_threshold)
        planes[r.exam_id] = prob.data[k]
    return recs, planes


def per_exam_dice(run: TrainedRun, manifest, partition: str = "test") -> dict:
    """Dice against the phantom ground truth on each exam's evaluation slice."""
    recs, planes = predict_partition(run, manifest, partition)
    return {r.exam_id: dice(threshold_plane(planes[r.exam_id], run.config.rel_threshold), r.gt[r.slice_index])
            for r in recs}


def evaluate_run(run: TrainedRun, manifest, partition: str = "test") -> EvaluationReport:
    """Model versus leave-one-out rater consensus, as in the ``evaluate`` command."""
    recs, planes = predict_partition(run, manifest, partition)
    if any(len(r.raters) < 2 for r in recs):
        raise ValueError("evaluation needs at least two rater masks per exam")
    masks = {}
    for r in recs:
        data = np.zeros(r.inputs.shape[1:], np.uint8)
        data[r.slice_index] = threshold_plane(planes[r.exam_id], run.config.rel_threshold)
        masks[r.exam_id] = SegmentationMask(data, r.slice_index, "model")
    return evaluate_test_set(masks, {r.exam_id: r.raters for r in recs}, planes, run.config.rel_threshold)


@dataclass
class AblationResult:
    flag: str
    values: tuple
    rows: list = field(default_factory=list)
    test: RankTestResult | None = None
    alternative: str = "two-sided"

    @property
    def median_a(self) -> float:
        return float(np.median([r["dice_a"] for r in self.rows]))

    @property
    def median_b(self) -> float:
        return float(np.median([r["dice_b"] for r in self.rows]))

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["exam_id", "dice_a", "dice_b"])
            w.writeheader()
            w.writerows(self.rows)
        return path

    def summary(self) -> dict:
        return {"flag": self.flag, "a": self.values[0], "b": self.values[1], "n": len(self.rows),
                "median_a": self.median_a, "median_b": self.median_b, "alternative": self.alternative,
                "statistic": self.test.statistic, "p_value": self.test.p_value, "method": self.test.method}


def run_ablation(manifest, flag: str, base: RunConfig = RunConfig(), partition: str = "test",
                 alternative: str = "two-sided", values: tuple | None = None, progress=None) -> AblationResult:
    """Train the two settings of ``flag`` and compare them exam by exam.

    ``dice_a`` belongs to ``values[0]``; ``alternative="greater"`` tests
    whether setting a scores higher. CRF only acts at prediction time, so
    both of its settings share one trained network.
    """
    if flag not in ABLATIONS:
        raise ValueError(f"unknown ablation flag {flag!r}; choose from {sorted(ABLATIONS)}")
    values = tuple(values or ABLATIONS[flag])
    if len(values) != 2 or values[0] == values[1]:
        raise ValueError("an ablation needs two distinct values")
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    cfg_a, cfg_b = (replace(base, **{flag: v}) for v in values)
    run_a = train_run(manifest, cfg_a, progress)
    if flag == "crf":
        run_b = TrainedRun(cfg_b, run_a.graph, run_a.state, run_a.maps)
    else:
        run_b = train_run(manifest, cfg_b, progress)
    da, db = per_exam_dice(run_a, manifest, partition), per_exam_dice(run_b, manifest, partition)
    ids = sorted(da)
    rows = [{"exam_id": i, "dice_a": da[i], "dice_b": db[i]} for i in ids]
    test = wilcoxon_signed_rank([da[i] for i in ids], [db[i] for i in ids], alternative)
    return AblationResult(flag, values, rows, test, alternative)


@dataclass
class SizeTrend:
    sizes: tuple
    seeds: tuple
    # size -> best validation Dice per seed
    val_dice: dict

    @property
    def means(self) -> list:
        return [float(np.mean(self.val_dice[n])) for n in self.sizes]

    def holds(self, min_gain: float = 0.03) -> bool:
        """Means never decrease with size and the largest beats the smallest by ``min_gain``."""
        m = self.means
        return all(b >= a for a, b in zip(m, m[1:])) and m[-1] - m[0] >= min_gain

    def summary(self) -> dict:
        return {"sizes": list(self.sizes), "seeds": list(self.seeds),
                "val_dice": {str(n): v for n, v in self.val_dice.items()}, "means": self.means,
                "holds": self.holds()}


def size_trend(manifest, sizes=(16, 64, 160), seeds=(0, 1, 2), base: RunConfig = RunConfig(),
               progress=None) -> SizeTrend:
    """Best validation Dice after training on the first ``n`` exams per class, per seed."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    sizes = tuple(sorted(sizes))
    out = {}
    for n in sizes:
        out[n] = [train_run(manifest, replace(base, n_train=n, seed=s), progress).state.best_val_dice
                  for s in seeds]
    return SizeTrend(sizes, tuple(seeds), out)


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["patch"], d["tile"] = list(cfg.patch), list(cfg.tile)
    return d
