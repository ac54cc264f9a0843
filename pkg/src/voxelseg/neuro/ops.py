"""Layer ops for 5-D tensors laid out as (batch, channel, slice, row, col).

Convolutions are cross-correlations without padding. Pooling and
upsampling take an ``axes`` argument so networks can restrict them to the
in-plane axes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate, as_tensor, result

SPATIAL = (2, 3, 4)
INPLANE = (3, 4)
# im2col buffers above this many elements are processed in depth chunks
_CHUNK_ELEMS = 1 << 25


def _correlate(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of (B,Ci,D,H,W) with (Co,Ci,kd,kh,kw).

    Samples are processed one at a time so every GEMM has the same shape
    whatever the batch size, which keeps results bit-identical across
    batchings (tiled inference relies on this).
    """
    kd, kh, kw = k.shape[2:]
    B, Ci, D, H, W = x.shape
    Do, Ho, Wo = D - kd + 1, H - kh + 1, W - kw + 1
    per_slice = Ho * Wo * Ci * kd * kh * kw
    step = max(1, _CHUNK_ELEMS // max(per_slice, 1))
    dtype = np.result_type(x, k)
    out = np.empty((B, k.shape[0], Do, Ho, Wo), dtype=dtype)
    for b in range(B):
        for d0 in range(0, Do, step):
            d1 = min(Do, d0 + step)
            win = sliding_window_view(x[b, :, d0 : d1 + kd - 1], (kd, kh, kw), axis=(1, 2, 3))
            part = np.tensordot(win, k, axes=([0, 4, 5, 6], [1, 2, 3, 4]))
            out[b, :, d0:d1] = np.moveaxis(part, -1, 0)
    return out


def _kernel_grad(x: np.ndarray, g: np.ndarray, kshape) -> np.ndarray:
    kd, kh, kw = kshape
    Do = g.shape[2]
    B, Ci = x.shape[:2]
    per_slice = B * g.shape[3] * g.shape[4] * Ci * kd * kh * kw
    step = max(1, _CHUNK_ELEMS // max(per_slice, 1))
    gk = None
    for d0 in range(0, Do, step):
        d1 = min(Do, d0 + step)
        win = sliding_window_view(x[:, :, d0 : d1 + kd - 1], (kd, kh, kw), axis=(2, 3, 4))
        part = np.tensordot(g[:, :, d0:d1], win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gk = part if gk is None else gk + part
    return gk


def conv3d_valid(x, k, bias=None) -> Tensor:
    """Unpadded 3-D cross-correlation; each spatial axis shrinks by kernel-1."""
    x, k = as_tensor(x), as_tensor(k)
    bias = None if bias is None else as_tensor(bias)
    kd, kh, kw = k.shape[2:]
    if x.data.ndim != 5:
        raise ValueError(f"expected 5-D input, got shape {x.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}")
    if any(s < e for s, e in zip(x.shape[2:], (kd, kh, kw))):
        raise ValueError(f"spatial dims {x.shape[2:]} smaller than kernel {(kd, kh, kw)}")
    out = _correlate(x.data, k.data)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        if k.requires_grad:
            accumulate(k, _kernel_grad(x.data, g, (kd, kh, kw)))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = np.ascontiguousarray(k.data[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
            accumulate(x, _correlate(gp, flipped))

    parents = [x, k] + ([bias] if bias is not None else [])
    return result(out, parents, backward, "conv3d_valid")


def conv1x1(x, k, bias=None) -> Tensor:
    """Pointwise channel mixing with a (Co, Ci, 1, 1, 1) kernel."""
    x, k = as_tensor(x), as_tensor(k)
    bias = None if bias is None else as_tensor(bias)
    if tuple(k.shape[2:]) != (1, 1, 1):
        raise ValueError(f"conv1x1 needs a 1x1x1 kernel, got {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}")
    w = k.data[:, :, 0, 0, 0]
    out = np.stack([np.tensordot(w, xb, axes=([1], [0])) for xb in x.data])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        if k.requires_grad:
            gw = np.einsum("bodhw,bcdhw->oc", g, x.data, optimize=True)
            accumulate(k, gw[:, :, None, None, None])
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            accumulate(x, np.einsum("oc,bodhw->bcdhw", w, g, optimize=True))

    parents = [x, k] + ([bias] if bias is not None else [])
    return result(out, parents, backward, "conv1x1")


def _take(a, axis, sl):
    idx = [slice(None)] * a.ndim
    idx[axis] = sl
    return tuple(idx)


def _pool_axis(x: Tensor, axis: int) -> Tensor:
    L = x.shape[axis]
    if L < 3:
        raise ValueError(f"axis {axis} has length {L}, pooling needs at least 3")
    n = (L - 3) // 2 + 1
    d = x.data
    out = (d[_take(d, axis, slice(0, 2 * n - 1, 2))] + d[_take(d, axis, slice(1, 2 * n, 2))]
           + d[_take(d, axis, slice(2, 2 * n + 1, 2))]) / 3.0

    def backward(g):
        gx = np.zeros_like(x.data)
        g3 = g / 3.0
        for j in range(3):
            gx[_take(gx, axis, slice(j, 2 * n - 1 + j, 2))] += g3
        accumulate(x, gx)

    return result(out.astype(d.dtype, copy=False), [x], backward, "avg_pool")


def avg_pool3_s2(x, axes=SPATIAL) -> Tensor:
    """Average pooling, window 3 and stride 2, along each axis in ``axes``."""
    x = as_tensor(x)
    for ax in axes:
        x = _pool_axis(x, ax)
    return x


def _upsample_axis(x: Tensor, kernel: Tensor, axis: int) -> Tensor:
    L = x.shape[axis]
    w = kernel.data
    shape = list(x.shape)
    shape[axis] = 2 * L + 1
    out = np.zeros(shape, dtype=np.result_type(x.data, w))
    for j in range(3):
        out[_take(out, axis, slice(j, 2 * L + j, 2))] += w[j] * x.data

    def backward(g):
        if x.requires_grad:
            gx = sum(w[j] * g[_take(g, axis, slice(j, 2 * L + j, 2))] for j in range(3))
            accumulate(x, gx)
        if kernel.requires_grad:
            gk = np.array([np.sum(g[_take(g, axis, slice(j, 2 * L + j, 2))] * x.data) for j in range(3)])
            accumulate(kernel, gk)

    return result(out, [x, kernel], backward, "upsample")


BILINEAR_KERNEL = np.array([0.5, 1.0, 0.5], dtype=np.float32)


def bilinear_up_x2(x, kernel=None, axes=SPATIAL) -> Tensor:
    """Stride-2 transposed convolution with the fixed kernel (0.5, 1, 0.5).

    Along each axis in ``axes`` a length-L input becomes 2L+1; output index
    ``2i+1`` carries input ``i`` and even indices the midpoint average, so
    the result is exact linear interpolation except at the two outermost
    samples, which only receive half a contribution.
    """
    x = as_tensor(x)
    if kernel is None:
        kernel = Tensor(BILINEAR_KERNEL)
    for ax in axes:
        x = _upsample_axis(x, kernel, ax)
    return x


def crop_center(x, spatial) -> Tensor:
    """Centre-crop the spatial axes of ``x`` to ``spatial`` (even margins only)."""
    x = as_tensor(x)
    spatial = tuple(int(s) for s in spatial)
    sl = [slice(None), slice(None)]
    for have, want in zip(x.shape[2:], spatial):
        margin = have - want
        if margin < 0 or margin % 2:
            raise ValueError(f"cannot centre-crop {x.shape[2:]} to {spatial}: margins must be even and >= 0")
        sl.append(slice(margin // 2, margin // 2 + want))
    sl = tuple(sl)
    if all(s.start in (None, 0) for s in sl[2:]) and tuple(x.shape[2:]) == spatial:
        return x
    out = x.data[sl].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        accumulate(x, gx)

    return result(out, [x], backward, "crop_center")


def concat_channels(*xs) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        for x, a, b in zip(xs, bounds[:-1], bounds[1:]):
            accumulate(x, g[:, a:b])

    return result(out, xs, backward, "concat")


def concat_crop(a, b) -> Tensor:
    """Centre-crop ``a`` to ``b``'s spatial dims and stack channels (a first)."""
    a, b = as_tensor(a), as_tensor(b)
    return concat_channels(crop_center(a, b.shape[2:]), b)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward(g):
        accumulate(x, g * mask)

    return result(out, [x], backward, "relu")


def softmax_channels(x) -> Tensor:
    """Per-voxel softmax over axis 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        accumulate(x, s * (g - np.sum(g * s, axis=1, keepdims=True)))

    return result(s, [x], backward, "softmax")


def weighted_sum(x, w) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant array ``w``."""
    x = as_tensor(x)
    w = np.asarray(w)
    out = np.asarray(np.sum(x.data.astype(np.float64) * w), dtype=x.data.dtype)

    def backward(g):
        accumulate(x, (g * w).astype(x.data.dtype))

    return result(out, [x], backward, "weighted_sum")


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        accumulate(x, gx)

    return result(out, [x], backward, "slice_channels")


DICE_EPS = 1e-5


def generalized_dice_loss(probs, target, eps: float = DICE_EPS, norm_tol=1e-4) -> Tensor:
    """Generalized Dice loss with inverse squared class-volume weights.

    ``loss = 1 - 2 sum_c w_c sum_v p t / sum_c w_c sum_v (p + t)`` with
    ``w_c = 1 / (sum_v t_cv + eps)^2``; sums run over batch and voxels and
    are accumulated in float64. A class absent from the target takes the
    largest weight among present classes instead of ``1 / eps^2``, which
    would otherwise drive its probability to zero everywhere and saturate
    the softmax. ``norm_tol=None`` skips the normalization check, which
    finite-difference probes of single coordinates need.
    """
    probs = as_tensor(probs)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if t.shape != probs.shape:
        raise ValueError(f"target shape {t.shape} != probs shape {probs.shape}")
    p = probs.data.astype(np.float64)
    if norm_tol is not None and np.max(np.abs(p.sum(axis=1) - 1.0)) > norm_tol:
        raise ValueError("probabilities are not normalized over channels")
    if np.any((t != 0) & (t != 1)) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 0:
        raise ValueError("target must be one-hot over channels")
    red = (0,) + tuple(range(2, p.ndim))
    tc = t.sum(axis=red)
    w = 1.0 / (tc + eps) ** 2
    present = tc > 0
    if present.any() and not present.all():
        w = np.where(present, w, w[present].max())
    inter = (p * t).sum(axis=red)
    total = (p + t).sum(axis=red)
    num = float(np.sum(w * inter))
    den = float(np.sum(w * total))
    loss = 1.0 - 2.0 * num / den
    bshape = (1, -1) + (1,) * (p.ndim - 2)
    wb = w.reshape(bshape)

    def backward(g):
        grad = -2.0 * wb * (t * den - num) / den**2
        accumulate(probs, (float(g) * grad).astype(probs.data.dtype))

    return result(np.asarray(loss, dtype=probs.data.dtype), [probs], backward, "generalized_dice_loss")
