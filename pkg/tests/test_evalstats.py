import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from voxelseg.evalstats import (average_roc, confusion, consensus_reference, dice, evaluate_test_set, mann_whitney_u,
                                roc, svg_line_plot, tost_equivalence, wilcoxon_signed_rank)
from voxelseg.volio import SegmentationMask


def enum_signed_rank(d):
    """Exact one-sided p-values by listing every sign pattern of the ranks."""
    d = np.asarray(d, float)
    d = d[d != 0]
    a = np.abs(d)
    ranks = np.array([np.sum(a < x) + (np.sum(a == x) + 1) / 2 for x in a])
    w = ranks[d > 0].sum()
    signs = np.array(list(itertools.product((0, 1), repeat=len(d))))
    null = signs @ ranks
    return np.mean(null >= w - 1e-9), np.mean(null <= w + 1e-9), w


def enum_rank_sum(a, b):
    pooled = np.r_[a, b]
    n = len(a)
    u_obs = sum((x > y) + 0.5 * (x == y) for x in a for y in b)
    us = []
    for idx in itertools.combinations(range(len(pooled)), n):
        ga = pooled[list(idx)]
        gb = np.delete(pooled, list(idx))
        us.append(sum((x > y) + 0.5 * (x == y) for x in ga for y in gb))
    us = np.array(us)
    return u_obs, np.mean(us >= u_obs - 1e-9), np.mean(us <= u_obs + 1e-9)


# --- Dice and confusion -------------------------------------------------------


def test_dice_cases():
    a = np.zeros((4, 4), bool)
    a[0, :3] = True
    b = np.zeros((4, 4), bool)
    b[0, 1:4] = True
    assert confusion(a, b).tp == 2 and confusion(a, b).fp == 1 and confusion(a, b).fn == 1
    assert dice(a, b) == pytest.approx(4 / 6, abs=1e-12)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)) < 0.4, rng.random((6, 6)) < 0.4
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_dice_slice_mismatch():
    a = SegmentationMask(np.zeros((3, 4, 4), np.uint8), 1, "a")
    b = SegmentationMask(np.zeros((3, 4, 4), np.uint8), 2, "b")
    with pytest.raises(ValueError):
        dice(a, b)


# --- consensus ----------------------------------------------------------------


def _masks(arrays, k=0):
    return [SegmentationMask(np.asarray(a, np.uint8)[None], k, f"radiologist:R{i + 1}") for i, a in enumerate(arrays)]


def test_consensus_identical_and_empty(rng):
    m = rng.random((5, 5)) < 0.5
    assert np.array_equal(consensus_reference(_masks([m, m, m]), "R1").data[0], m)
    out = consensus_reference(_masks([m, m, np.zeros_like(m)]), "R1")
    assert not out.data.any()


@given(st.integers(0, 2**31 - 1), st.integers(3, 6))
def test_consensus_is_and_of_others(seed, n):
    rng = np.random.default_rng(seed)
    arrs = [rng.random((6, 6)) < 0.6 for _ in range(n)]
    masks = _masks(arrs)
    ex = int(rng.integers(n))
    ref = consensus_reference(masks, f"R{ex + 1}").data[0].astype(bool)
    others = [a for i, a in enumerate(arrs) if i != ex]
    assert np.array_equal(ref, np.logical_and.reduce(others))
    assert all(np.all(ref <= a) for a in others)


def test_consensus_needs_two():
    with pytest.raises(ValueError):
        consensus_reference(_masks([np.ones((2, 2)), np.ones((2, 2))]), "R1")


# --- ROC ----------------------------------------------------------------------


def test_roc_separated_and_reversed():
    y = np.array([0, 0, 1, 1])
    assert roc([0.1, 0.2, 0.8, 0.9], y).auc == 1.0
    assert roc([0.9, 0.8, 0.2, 0.1], y).auc == 0.0
    with pytest.raises(ValueError):
        roc([0.1, 0.2], [1, 1])


def test_roc_null_distribution(rng):
    s = rng.normal(size=20_000)
    y = np.r_[np.zeros(10_000), np.ones(10_000)]
    assert 0.48 <= roc(s, y).auc <= 0.52


@given(st.integers(0, 2**31 - 1))
def test_auc_equals_normalized_u(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 30, 2)
    # rounding forces ties
    a, b = np.round(rng.normal(0.5, 1, n), 1), np.round(rng.normal(0, 1, m), 1)
    u = mann_whitney_u(a, b).statistic
    auc = roc(np.r_[a, b], np.r_[np.ones(n), np.zeros(m)]).auc
    assert abs(u / (n * m) - auc) < 1e-9


def test_average_roc_of_identical_curves():
    c = roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    avg = average_roc([c, c])
    assert avg.fpr[0] == 0 and avg.fpr[-1] == 1
    assert avg.tpr[-1] == 1.0
    assert abs(avg.auc - c.auc) < 0.01


# --- Wilcoxon -----------------------------------------------------------------


def test_wilcoxon_degenerate():
    r = wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    assert r.degenerate and r.p_value == 1.0


def test_wilcoxon_all_positive_n6():
    r = wilcoxon_signed_rank(np.arange(1, 7), np.zeros(6), "greater")
    assert r.p_value == pytest.approx(1 / 64, abs=1e-15)
    assert r.statistic == 21


def test_wilcoxon_exact_matches_enumeration():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        d = np.round(rng.normal(0.3, 1, n), 1)
        if not np.any(d):
            continue
        pg, pl, w = enum_signed_rank(d)
        for alt, want in (("greater", pg), ("less", pl), ("two-sided", min(1.0, 2 * min(pg, pl)))):
            r = wilcoxon_signed_rank(d, np.zeros(n), alt)
            assert r.method == "exact" and r.statistic == w
            assert abs(r.p_value - want) < 1e-12


def test_wilcoxon_large_n_matches_permutation(rng):
    n = 250
    d = rng.normal(0.1, 1, n)
    w = wilcoxon_signed_rank(d, np.zeros(n), "greater")
    a = np.abs(d)
    ranks = np.argsort(np.argsort(a)) + 1.0
    signs = rng.integers(0, 2, (20_000, n))
    p_mc = np.mean(signs @ ranks >= w.statistic)
    assert w.method == "normal_approx"
    assert abs(w.p_value - p_mc) < 0.01


def test_wilcoxon_bad_input():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [0, 0], "sideways")


# --- TOST ---------------------------------------------------------------------


def test_tost_dominance_n50(rng):
    lo = rng.uniform(0.5, 0.7, 50)
    hi = lo + 0.3
    s = lo + rng.uniform(0.01, 0.29, 50)
    t = tost_equivalence(s, lo, hi)
    assert t.p_lower < 1e-6 and t.p_upper < 1e-6 and t.equivalent


def test_tost_below_and_degenerate(rng):
    lo = rng.uniform(0.5, 0.7, 20)
    t = tost_equivalence(lo - 0.1, lo, lo + 0.3)
    assert t.p_lower > 0.99 and not t.equivalent
    t = tost_equivalence(lo, lo, lo + 0.3)
    assert t.lower.degenerate and not t.equivalent


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_tost_monotone_toward_interior(seed, frac):
    rng = np.random.default_rng(seed)
    n = 20
    lo = rng.uniform(0.4, 0.6, n)
    hi = lo + 0.3
    s = lo + rng.uniform(-0.05, 0.35, n)
    mid = (lo + hi) / 2
    moved = s + frac * (mid - s)
    before, after = tost_equivalence(s, lo, hi), tost_equivalence(moved, lo, hi)
    if before.equivalent:
        assert after.equivalent


# --- Mann-Whitney -------------------------------------------------------------


def test_mwu_hand_cases():
    r = mann_whitney_u([1.0], [1.0])
    assert r.statistic == 0.5 and r.p_value == 1.0
    r = mann_whitney_u([1, 2, 3], [4, 5, 6], "less")
    assert r.statistic == 0 and r.p_value == pytest.approx(1 / 20, abs=1e-15)
    with pytest.raises(ValueError):
        mann_whitney_u([], [1])


@given(st.integers(0, 2**31 - 1))
def test_mwu_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 6, 2)
    a, b = np.round(rng.normal(0, 1, n), 1), np.round(rng.normal(0, 1, m), 1)
    u, pg, pl = enum_rank_sum(a, b)
    assert mann_whitney_u(a, b).statistic == u
    assert abs(mann_whitney_u(a, b, "greater").p_value - pg) < 1e-12
    assert abs(mann_whitney_u(a, b, "less").p_value - pl) < 1e-12


# --- test-set evaluation ------------------------------------------------------


def _disk(n=21, r=5):
    yy, xx = np.mgrid[:n, :n] - n // 2
    return yy**2 + xx**2 <= r * r


def test_evaluate_perfect_agreement():
    gt = _disk()
    raters = {"e1": _masks([gt] * 4), "e2": _masks([gt] * 3)}
    model = {"e1": SegmentationMask(gt[None].astype(np.uint8), 0, "model"),
             "e2": SegmentationMask(gt[None].astype(np.uint8), 0, "model")}
    rep = evaluate_test_set(model, raters)
    assert len(rep.rows) == 7
    assert all(r["dice_model"] == 1.0 and r["delta_dice"] == 0 for r in rep.rows)


def test_evaluate_model_gt_beats_morphological_raters(tmp_path):
    gt = _disk()
    arrs = [gt, ndimage.binary_dilation(gt), ndimage.binary_dilation(gt, iterations=2), ndimage.binary_erosion(gt)]
    model = {"e": SegmentationMask(gt[None].astype(np.uint8), 0, "model")}
    prob = {"e": ndimage.gaussian_filter(gt.astype(float), 1.0)}
    rep = evaluate_test_set(model, {"e": _masks(arrs)}, prob, threshold=0.6)
    assert len(rep.rows) == 4
    assert all(r["dice_model"] >= r["dice_rater"] for r in rep.rows)
    assert rep.summary["auc_mean"] > 0.95
    rep.write(tmp_path)
    assert len((tmp_path / "report.csv").read_text().strip().splitlines()) == 5
    assert json.loads((tmp_path / "summary.json").read_text())["n_rows"] == 4


def test_evaluate_needs_two_raters():
    gt = _disk()
    with pytest.raises(ValueError):
        evaluate_test_set({"e": SegmentationMask(gt[None].astype(np.uint8), 0, "m")}, {"e": _masks([gt])})


def test_svg_plot_writes(tmp_path):
    svg_line_plot({"a": ([0, 1], [0, 1]), "b": ([0, 1], [1, 1])}, tmp_path / "p.svg", "t", "x", "y")
    text = (tmp_path / "p.svg").read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2
