"""Whole-volume prediction by tiling, relative-max thresholding, component filtering."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .neuro import no_grad
from .volio import SegmentationMask, Volume

DEFAULT_REL_THRESHOLD = 0.60
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
PEAK_TOL = 1e-6
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Tile:
    input_origin: tuple
    output_origin: tuple
    size: tuple


@dataclass
class TilingPlan:
    dims: tuple
    input_patch: tuple
    output_tile: tuple
    margins: tuple
    tiles: list

    def coverage(self, owner_only: bool = True) -> np.ndarray:
        """Per-voxel write count; with ``owner_only`` only the last writer counts."""
        if not owner_only:
            cov = np.zeros(self.dims, dtype=np.int32)
            for t in self.tiles:
                cov[_box(t.output_origin, t.size)] += 1
            return cov
        owner = np.full(self.dims, -1, dtype=np.int64)
        for i, t in sorted(enumerate(self.tiles), key=lambda it: it[1].output_origin):
            owner[_box(t.output_origin, t.size)] = i
        cov = np.zeros(self.dims, dtype=np.int32)
        for i, t in enumerate(self.tiles):
            cov[_box(t.output_origin, t.size)] += owner[_box(t.output_origin, t.size)] == i
        return cov


def _box(origin, size):
    return tuple(slice(o, o + s) for o, s in zip(origin, size))


def _axis_starts(n: int, t: int) -> list:
    starts = list(range(0, n - t + 1, t))
    if starts[-1] + t < n:
        # shift the remainder tile inward; it overrides the overlap
        starts.append(n - t)
    return starts


def plan_tiling(volume_dims, input_patch, output_tile) -> TilingPlan:
    """Non-overlapping output tiles with inputs extended by the receptive margin."""
    dims = tuple(int(v) for v in volume_dims)
    inp = tuple(int(v) for v in input_patch)
    out = tuple(int(v) for v in output_tile)
    if min(dims) < 1 or min(out) < 1:
        raise ValueError("volume and tile dims must be positive")
    margins = []
    for i, o, n in zip(inp, out, dims):
        if o > i or (i - o) % 2:
            raise ValueError(f"output tile {out} must sit centred in input patch {inp}")
        if o > n:
            raise ValueError(f"output tile {out} larger than volume {dims}")
        margins.append((i - o) // 2)
    tiles = []
    for origin in itertools.product(*[_axis_starts(n, t) for n, t in zip(dims, out)]):
        tiles.append(Tile(tuple(o - m for o, m in zip(origin, margins)), tuple(origin), out))
    return TilingPlan(dims, inp, out, tuple(margins), tiles)


def _pad(arr: np.ndarray, margins, lead: int) -> np.ndarray:
    return np.pad(arr, [(0, 0)] * lead + [(m, m) for m in margins], mode="reflect")


def predict_volume(graph, inputs, plan: TilingPlan | None = None, slices=None, prior=None,
                   batch_size: int = 8) -> Volume:
    """Assemble the class-1 probability of every voxel (or only ``slices``).

    ``inputs`` is a ``ModelInput`` or a ``(C, D, H, W)`` array; ``prior`` an
    optional ``(D, H, W)`` map fed to graphs with a prior channel. Voxels in
    slices not requested stay 0.
    """
    arr = inputs.array() if hasattr(inputs, "array") else np.asarray(inputs, dtype=np.float32)
    dims = arr.shape[1:]
    plan = plan or plan_tiling(dims, graph.input_patch, graph.output_tile)
    if tuple(plan.input_patch) != tuple(graph.input_patch) or tuple(plan.output_tile) != tuple(graph.output_tile):
        raise ValueError("tiling plan does not match the graph's patch geometry")
    if tuple(plan.dims) != tuple(dims):
        raise ValueError(f"plan dims {plan.dims} != input dims {dims}")
    padded = _pad(arr, plan.margins, 1)
    wanted = None if slices is None else set(int(s) for s in np.atleast_1d(slices))
    # commit in origin order so inward-shifted border tiles always win overlaps,
    # whatever order the plan lists them in
    tiles = sorted((t for t in plan.tiles
                    if wanted is None or wanted.intersection(range(t.output_origin[0], t.output_origin[0] + t.size[0]))),
                   key=lambda t: t.output_origin)
    out = np.zeros(dims, dtype=np.float32)
    prior_arr = None if prior is None else np.asarray(prior, dtype=np.float32)
    with no_grad():
        for i in range(0, len(tiles), batch_size):
            chunk = tiles[i : i + batch_size]
            x = np.stack([padded[(slice(None),) + _box([o + m for o, m in zip(t.input_origin, plan.margins)],
                                                       plan.input_patch)] for t in chunk])
            p = None
            if prior_arr is not None:
                p = np.stack([prior_arr[_box(t.output_origin, t.size)][None] for t in chunk])
            probs = graph.forward_patch(x, p).data[:, 1]
            for t, pr in zip(chunk, probs):
                out[_box(t.output_origin, t.size)] = pr
    spacing = inputs.channels[0].spacing if hasattr(inputs, "channels") else (1.0, 1.0, 1.0)
    return Volume(np.clip(out, 0.0, 1.0), spacing)


def threshold_plane(plane, rel_threshold: float = DEFAULT_REL_THRESHOLD, keep_all_components: bool = False) -> np.ndarray:
    """Binarize at ``rel_threshold * max`` and keep 8-connected components
    that contain a voxel within ``PEAK_TOL`` of the maximum."""
    p = np.asarray(plane, dtype=np.float64)
    m = float(p.max()) if p.size else 0.0
    if m <= 0:
        return np.zeros(p.shape, dtype=bool)
    mask = p >= rel_threshold * m
    if keep_all_components:
        return mask
    lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    peaks = np.unique(lab[(p >= (1.0 - PEAK_TOL) * m) & mask])
    return np.isin(lab, peaks[peaks > 0])


def threshold_slice(prob_map: Volume, slice_idx: int, rel_threshold: float = DEFAULT_REL_THRESHOLD,
                    keep_all_components: bool = False) -> SegmentationMask:
    data = np.zeros(prob_map.dims, dtype=np.uint8)
    data[slice_idx] = threshold_plane(prob_map.data[slice_idx], rel_threshold, keep_all_components)
    return SegmentationMask(data, slice_idx, "model")


@dataclass
class ThresholdSelection:
    best: float
    grid: tuple
    scores: tuple


def _dice2d(a, b) -> float:
    tp = np.sum(a & b)
    den = a.sum() + b.sum()
    return 1.0 if den == 0 else 2.0 * tp / den


def _as_plane(r) -> np.ndarray:
    if isinstance(r, SegmentationMask):
        return r.slice2d() if r.slice_index is not None else r.data.astype(bool)
    return np.asarray(r, dtype=bool)


def select_threshold(maps, references, grid=DEFAULT_GRID, keep_all_components: bool = False) -> ThresholdSelection:
    """Grid value maximizing mean Dice (over exams, each averaged over its
    references); the lowest threshold wins ties."""
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    if len(maps) != len(references) or not maps:
        raise ValueError("need one reference set per map")
    refs = [[_as_plane(r) for r in rs] for rs in references]
    if any(len(r) == 0 for r in refs):
        raise ValueError("every exam needs at least one reference")
    scores = []
    for g in grid:
        per_exam = []
        for plane, rs in zip(maps, refs):
            mask = threshold_plane(plane, g, keep_all_components)
            per_exam.append(np.mean([_dice2d(mask, r) for r in rs]))
        scores.append(float(np.mean(per_exam)))
    order = sorted(range(len(grid)), key=lambda i: (-scores[i], grid[i]))
    best = grid[order[0]]
    return ThresholdSelection(best, grid, tuple(scores))
