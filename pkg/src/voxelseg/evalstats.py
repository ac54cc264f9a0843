"""Overlap metrics, consensus references, ROC and rank-based tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volio import SegmentationMask

EXACT_WILCOXON_MAX_N = 12
EXACT_MWU_MAX_MIN = 8


# --- overlap --------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _plane(m):
    if isinstance(m, SegmentationMask):
        return m.data.astype(bool), m.slice_index
    return np.asarray(m).astype(bool), None


def confusion(pred, ref) -> ConfusionCounts:
    a, ka = _plane(pred)
    b, kb = _plane(ref)
    if a.shape != b.shape:
        raise ValueError(f"frame mismatch: {a.shape} vs {b.shape}")
    if ka is not None and kb is not None and ka != kb:
        raise ValueError(f"slice mismatch: {ka} vs {kb}")
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    return ConfusionCounts(tp, fp, fn, a.size - tp - fp - fn)


def dice(a, b) -> float:
    """``2TP / (2TP + FP + FN)``; two empty masks score 1.0."""
    c = confusion(a, b)
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2.0 * c.tp / den


def consensus_reference(masks, exclude=None) -> SegmentationMask:
    """Voxelwise AND of every rater mask except ``exclude``."""
    keep = [m for m in masks if exclude is None or m.rater_id != exclude]
    if len(keep) < 2:
        raise ValueError(f"consensus needs >= 2 raters, {len(keep)} remain")
    data = np.logical_and.reduce([m.data.astype(bool) for m in keep])
    ks = {m.slice_index for m in keep}
    k = ks.pop() if len(ks) == 1 else None
    return SegmentationMask(data.astype(np.uint8), k, "consensus")


# --- ROC ------------------------------------------------------------------


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(scores, reference) -> RocCurve:
    """ROC over all unique score thresholds, AUC by the trapezoid rule."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(getattr(reference, "data", reference)).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and reference differ in size")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("reference needs positive and negative voxels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return RocCurve(fpr, tpr, float(np.trapezoid(tpr, fpr)))


def average_roc(curves, grid=None) -> RocCurve:
    """Pointwise mean TPR on a common FPR grid (upper envelope per curve)."""
    grid = np.linspace(0, 1, 201) if grid is None else np.asarray(grid, dtype=np.float64)
    rows = []
    for c in curves:
        idx = np.searchsorted(c.fpr, grid, side="right") - 1
        rows.append(c.tpr[np.clip(idx, 0, len(c.tpr) - 1)])
    tpr = np.mean(rows, axis=0)
    return RocCurve(grid, tpr, float(np.trapezoid(tpr, grid)))


# --- rank tests -----------------------------------------------------------


@dataclass
class RankTestResult:
    statistic: float
    p_value: float
    n_effective: int
    method: str
    alternative: str = "two-sided"
    degenerate: bool = False


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_sizes(x: np.ndarray) -> np.ndarray:
    _, counts = np.unique(x, return_counts=True)
    return counts.astype(np.float64)


def _combine(p_greater: float, p_less: float, alternative: str) -> float:
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    elif alternative == "two-sided":
        p = 2.0 * min(p_greater, p_less)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return float(min(1.0, max(0.0, p)))


def _signed_rank_null(doubled: np.ndarray) -> np.ndarray:
    """Counts of each doubled positive-rank sum over all 2^n sign patterns."""
    total = int(doubled.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled.astype(int):
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    return dist


def wilcoxon_signed_rank(a, b, alternative: str = "two-sided", exact_max_n: int = EXACT_WILCOXON_MAX_N) -> RankTestResult:
    """Paired signed-rank test on ``a - b``; the statistic is the positive-rank sum.

    Zero differences are dropped and tied magnitudes share average ranks.
    ``greater`` tests whether ``a`` tends to exceed ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two paired 1D samples")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return RankTestResult(0.0, 1.0, 0, "exact", alternative, degenerate=True)
    r = _ranks(np.abs(d))
    w = float(r[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * r).astype(int)
        dist = _signed_rank_null(doubled)
        dist /= dist.sum()
        w2 = int(round(2 * w))
        p_g = float(dist[w2:].sum())
        p_l = float(dist[: w2 + 1].sum())
        return RankTestResult(w, _combine(p_g, p_l, alternative), n, "exact", alternative)
    mu = n * (n + 1) / 4.0
    t = _tie_sizes(np.abs(d))
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t**3 - t)) / 48.0
    sd = math.sqrt(var)
    p_g = _norm_sf((w - mu - 0.5) / sd)
    p_l = 1.0 - _norm_sf((w - mu + 0.5) / sd)
    return RankTestResult(w, _combine(p_g, p_l, alternative), n, "normal_approx", alternative)


@dataclass
class TostResult:
    p_lower: float
    p_upper: float
    equivalent: bool
    alpha: float
    lower: RankTestResult
    upper: RankTestResult


def tost_equivalence(scores, lower_ref, upper_ref, alpha: float = 0.05) -> TostResult:
    """Two one-sided signed-rank tests: scores above ``lower_ref`` and below ``upper_ref``."""
    lo = wilcoxon_signed_rank(scores, lower_ref, "greater")
    hi = wilcoxon_signed_rank(scores, upper_ref, "less")
    eq = (not lo.degenerate and not hi.degenerate and lo.p_value < alpha and hi.p_value < alpha)
    return TostResult(lo.p_value, hi.p_value, bool(eq), alpha, lo, hi)


def _rank_sum_null(doubled: np.ndarray, k: int) -> np.ndarray:
    """Counts of doubled rank sums over all size-``k`` subsets."""
    total = int(doubled.sum())
    dp = np.zeros((k + 1, total + 1))
    dp[0, 0] = 1.0
    for r in doubled.astype(int):
        dp[1:, r:] = dp[1:, r:] + dp[:-1, : total + 1 - r]
    return dp[k]


def mann_whitney_u(group_a, group_b, alternative: str = "two-sided",
                   exact_max_min: int = EXACT_MWU_MAX_MIN) -> RankTestResult:
    """U of ``group_a``: pairs with a > b plus half the ties.

    ``greater`` tests whether ``group_a`` tends to be larger.
    """
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("both groups must be non-empty")
    pooled = np.r_[a, b]
    r = _ranks(pooled)
    u = float(r[:n].sum() - n * (n + 1) / 2.0)
    if min(n, m) <= exact_max_min:
        doubled = np.rint(2 * r).astype(int)
        # enumerate subsets for the smaller group, then map back to U of a
        k = min(n, m)
        dist = _rank_sum_null(doubled, k)
        dist /= dist.sum()
        sums = np.nonzero(dist)[0]
        probs = dist[sums]
        u_small = sums / 2.0 - k * (k + 1) / 2.0
        u_a = u_small if k == n else n * m - u_small
        p_g = float(probs[u_a >= u - 1e-9].sum())
        p_l = float(probs[u_a <= u + 1e-9].sum())
        return RankTestResult(u, _combine(p_g, p_l, alternative), n + m, "exact", alternative)
    N = n + m
    t = _tie_sizes(pooled)
    var = n * m / 12.0 * ((N + 1) - float(np.sum(t**3 - t)) / (N * (N - 1)))
    mu = n * m / 2.0
    if var <= 0:
        return RankTestResult(u, 1.0, N, "normal_approx", alternative, degenerate=True)
    sd = math.sqrt(var)
    p_g = _norm_sf((u - mu - 0.5) / sd)
    p_l = 1.0 - _norm_sf((u - mu + 0.5) / sd)
    return RankTestResult(u, _combine(p_g, p_l, alternative), N, "normal_approx", alternative)


# --- test-set evaluation --------------------------------------------------


@dataclass
class EvaluationReport:
    rows: list
    per_exam: list
    summary: dict = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["exam_id", "reference_id", "dice_model", "dice_rater", "delta_dice", "threshold"]
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in cols})
        (out / "summary.json").write_text(json.dumps(self.summary, indent=1))


def _pct(x, q):
    return float(np.percentile(np.asarray(x, dtype=np.float64), q)) if len(x) else float("nan")


def evaluate_test_set(model_masks: dict, rater_masks: dict, prob_maps: dict | None = None,
                      threshold: float = float("nan"), alpha: float = 0.05) -> EvaluationReport:
    """Compare model and raters against leave-one-rater-out consensus references.

    ``model_masks`` maps exam id to the model's slice mask, ``rater_masks``
    to the list of rater masks, ``prob_maps`` (optional) to the probability
    plane of the evaluated slice for ROC analysis.
    """
    rows, per_exam = [], []
    aucs, curves = [], []
    for exam_id in sorted(model_masks):
        raters = rater_masks.get(exam_id, [])
        if len(raters) < 2:
            raise ValueError(f"exam {exam_id}: need >= 2 rater masks, got {len(raters)}")
        model = model_masks[exam_id]
        md, rd = [], []
        for m in raters:
            ref = consensus_reference(raters, exclude=m.rater_id)
            dm, dr = dice(model, ref), dice(m, ref)
            md.append(dm)
            rd.append(dr)
            rows.append({"exam_id": exam_id, "reference_id": m.rater_id, "dice_model": dm,
                         "dice_rater": dr, "delta_dice": dm - dr, "threshold": threshold})
            if prob_maps is not None and exam_id in prob_maps:
                plane = ref.slice2d() if ref.slice_index is not None else ref.data.astype(bool)
                if plane.any() and not plane.all():
                    c = roc(prob_maps[exam_id], plane)
                    curves.append(c)
                    aucs.append(c.auc)
        per_exam.append({"exam_id": exam_id, "dice_model": float(np.mean(md)),
                         "dice_rater_mean": float(np.mean(rd)), "dice_rater_min": float(np.min(rd)),
                         "dice_rater_max": float(np.max(rd))})
    model_mean = [e["dice_model"] for e in per_exam]
    rater_mean = [e["dice_rater_mean"] for e in per_exam]
    summary = {
        "n_exams": len(per_exam),
        "n_rows": len(rows),
        "threshold": threshold,
        "median_dice_model": _pct(model_mean, 50),
        "median_dice_rater": _pct(rater_mean, 50),
        "dice_model_p5_p95": [_pct(model_mean, 5), _pct(model_mean, 95)],
        "dice_rater_p5_p95": [_pct(rater_mean, 5), _pct(rater_mean, 95)],
        "median_delta_dice": _pct([r["delta_dice"] for r in rows], 50),
    }
    if len(per_exam) >= 1:
        w = wilcoxon_signed_rank(model_mean, rater_mean)
        t = tost_equivalence(model_mean, [e["dice_rater_min"] for e in per_exam],
                             [e["dice_rater_max"] for e in per_exam], alpha)
        summary["wilcoxon"] = asdict(w)
        summary["tost"] = {"p_lower": t.p_lower, "p_upper": t.p_upper, "equivalent": t.equivalent,
                           "alpha": alpha, "W_lower": t.lower.statistic, "W_upper": t.upper.statistic}
    if aucs:
        summary["auc_mean"] = float(np.mean(aucs))
        summary["auc_average_curve"] = average_roc(curves).auc
    return EvaluationReport(rows, per_exam, summary)


# --- minimal SVG ----------------------------------------------------------


def svg_line_plot(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
                  width: int = 480, height: int = 360) -> None:
    """Write a bare-bones SVG with one polyline per ``name -> (x, y)`` series."""
    pad = 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#000000"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad}" y="{height - pad + 15}" font-size="10">{x0:.3g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 5}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{pad - 5}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(u, v) for u, v in zip(x, y)))
        c = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="11" fill="{c}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
