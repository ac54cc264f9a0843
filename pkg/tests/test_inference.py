import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from voxelseg.inference import (DEFAULT_GRID, TilingPlan, plan_tiling, predict_volume, select_threshold,
                                threshold_plane, threshold_slice)
from voxelseg.models import UNet3DConfig
from voxelseg.models.unet import UNet3D
from voxelseg.volio import Volume

PATCH, TILE = (3, 25, 25), (1, 13, 13)


def small_net(prior=False):
    return UNet3D(UNet3DConfig(in_channels=2, base_channels=3, levels=2, input_patch=PATCH, output_tile=TILE,
                               prior_channel=prior, seed=4))


# --- tiling -------------------------------------------------------------------


def test_plan_tile_count_divisible():
    plan = plan_tiling((19, 74, 74), (19, 75, 75), (1, 37, 37))
    assert len(plan.tiles) == 19 * 2 * 2
    assert plan.margins == (9, 19, 19)
    assert np.all(plan.coverage(owner_only=False) == 1)


@given(st.integers(1, 9), st.integers(13, 40), st.integers(13, 40))
def test_plan_covers_every_voxel_once_after_override(d, h, w):
    plan = plan_tiling((d, h, w), PATCH, TILE)
    assert np.all(plan.coverage() == 1)
    raw = plan.coverage(owner_only=False)
    assert raw.min() >= 1
    if h % 13 == 0 and w % 13 == 0:
        assert raw.max() == 1


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_tiling((0, 10, 10), PATCH, TILE)
    with pytest.raises(ValueError):
        plan_tiling((3, 10, 10), PATCH, TILE)
    with pytest.raises(ValueError):
        plan_tiling((3, 30, 30), (3, 24, 25), TILE)


# --- whole-volume prediction --------------------------------------------------


def test_zero_logit_network_gives_half():
    net = small_net()
    for p in net.trainable_parameters():
        p.data[...] = 0
    out = predict_volume(net, np.random.default_rng(0).normal(size=(2, 4, 20, 30)))
    assert out.dims == (4, 20, 30)
    assert np.all(out.data == 0.5)


def test_tiling_invariant_to_tile_order(rng):
    net = small_net(prior=True)
    x = rng.normal(size=(2, 5, 31, 29)).astype(np.float32)
    prior = rng.uniform(size=(5, 31, 29))
    plan = plan_tiling(x.shape[1:], PATCH, TILE)
    shuffled = TilingPlan(plan.dims, plan.input_patch, plan.output_tile, plan.margins,
                          [plan.tiles[i] for i in rng.permutation(len(plan.tiles))])
    a = predict_volume(net, x, plan, prior=prior, batch_size=3).data
    b = predict_volume(net, x, shuffled, prior=prior, batch_size=5).data
    assert np.array_equal(a, b)
    assert 0 <= a.min() and a.max() <= 1


def test_slice_subset_matches_full(rng):
    net = small_net()
    x = rng.normal(size=(2, 6, 26, 26)).astype(np.float32)
    full = predict_volume(net, x).data
    part = predict_volume(net, x, slices=[2]).data
    assert np.array_equal(part[2], full[2])
    assert not part[[0, 1, 3, 4, 5]].any()


def test_plan_geometry_mismatch(rng):
    net = small_net()
    x = rng.normal(size=(2, 4, 26, 26)).astype(np.float32)
    with pytest.raises(ValueError):
        predict_volume(net, x, plan_tiling((4, 26, 26), (3, 27, 27), TILE))
    with pytest.raises(ValueError):
        predict_volume(net, x, plan_tiling((4, 27, 26), PATCH, TILE))


# --- thresholding -------------------------------------------------------------


def _blob(shape, center, peak, sigma):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return peak * np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2 * sigma**2))


def test_zero_slice_empty_mask():
    assert not threshold_plane(np.zeros((8, 8))).any()


def test_single_peak_plateau():
    p = np.zeros((10, 10))
    p[2:7, 3:8] = 0.6
    p[4, 5] = 0.9
    m = threshold_plane(p, 0.6)
    assert np.array_equal(m, p >= 0.54)
    assert ndimage.label(m, np.ones((3, 3)))[1] == 1


def test_two_blobs_keep_max_component():
    p = np.maximum(_blob((40, 40), (10, 10), 0.9, 3), _blob((40, 40), (30, 30), 0.7, 3))
    m = threshold_plane(p, 0.6)
    lab, n = ndimage.label(p >= 0.54, np.ones((3, 3)))
    assert n == 2
    assert np.array_equal(m, lab == lab[10, 10])
    assert np.array_equal(threshold_plane(p, 0.6, keep_all_components=True), p >= 0.54)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_threshold_monotone(seed, a, b):
    p = np.random.default_rng(seed).uniform(size=(12, 12))
    lo, hi = min(a, b), max(a, b)
    assert np.all(threshold_plane(p, hi) <= threshold_plane(p, lo))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0), st.floats(0.05, 0.95))
def test_threshold_scale_invariant(seed, c, tau):
    rng = np.random.default_rng(seed)
    p = ndimage.gaussian_filter(rng.uniform(size=(16, 16)), 1.5)
    assert np.array_equal(threshold_plane(p, tau), threshold_plane(c * p, tau))


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_component_filter_idempotent(seed, tau):
    p = ndimage.gaussian_filter(np.random.default_rng(seed).uniform(size=(16, 16)), 1.0)
    once = threshold_plane(p, tau)
    assert np.array_equal(threshold_plane(np.where(once, p, 0.0), tau), once)


def test_threshold_slice_puts_mask_on_slice(rng):
    v = Volume(rng.uniform(size=(3, 8, 8)), (1, 1, 1))
    m = threshold_slice(v, 1)
    assert m.slice_index == 1 and m.source == "model"
    assert not m.data[[0, 2]].any()
    assert np.array_equal(m.slice2d(), threshold_plane(v.data[1]))


# --- threshold selection ------------------------------------------------------


def test_default_grid():
    assert 0.6 in DEFAULT_GRID and len(DEFAULT_GRID) == 19
    assert DEFAULT_GRID[0] == 0.05 and DEFAULT_GRID[-1] == 0.95


def _dice(a, b):
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2 * np.sum(a & b) / s


def _oracle_threshold(p, tau):
    mask = p >= tau * p.max()
    lab, _ = ndimage.label(mask, np.ones((3, 3)))
    return lab == lab[np.unravel_index(np.argmax(p), p.shape)]


def test_select_threshold_brute_force(rng):
    p = ndimage.gaussian_filter(rng.uniform(size=(20, 20)), 2.0)
    p = (p - p.min()) / (p.max() - p.min())
    ref = p > 0.7
    sel = select_threshold([p], [[ref]])
    brute = [_dice(_oracle_threshold(p, g), ref) for g in DEFAULT_GRID]
    assert sel.best == DEFAULT_GRID[int(np.argmax(brute))]
    assert np.allclose(sel.scores, brute)


def test_select_threshold_self_consistency(rng):
    maps = [np.maximum(_blob((24, 24), rng.integers(6, 18, 2), 1.0, s), 0.01) for s in (2.0, 3.0, 4.0)]
    refs = [[threshold_plane(m, 0.5)] for m in maps]
    sel = select_threshold(maps, refs)
    assert sel.scores[DEFAULT_GRID.index(0.5)] == 1.0
    assert sel.best == 0.5


def test_select_threshold_errors():
    with pytest.raises(ValueError):
        select_threshold([np.ones((2, 2))], [[np.ones((2, 2), bool)]], grid=())
    with pytest.raises(ValueError):
        select_threshold([np.ones((2, 2))], [])
    with pytest.raises(ValueError):
        select_threshold([np.ones((2, 2))], [[]])
