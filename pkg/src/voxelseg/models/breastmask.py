"""Low-resolution whole-volume breast/background segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..inference import predict_volume
from ..neuro import AdamState, adam_step, generalized_dice_loss
from .unet import UNet3D, UNet3DConfig

DOWNSAMPLE = 4


@dataclass
class BreastMaskConfig:
    in_channels: int = 1
    base_channels: int = 8
    input_patch: tuple = (1, 25, 25)
    output_tile: tuple = (1, 13, 13)
    seed: int = 3


def build_breast_mask_net(cfg: BreastMaskConfig | None = None) -> UNet3D:
    """Two-level U-Net with the same layer vocabulary as the lesion network."""
    cfg = cfg or BreastMaskConfig()
    return UNet3D(UNet3DConfig(in_channels=cfg.in_channels, base_channels=cfg.base_channels, levels=2,
                               input_patch=cfg.input_patch, output_tile=cfg.output_tile, seed=cfg.seed))


def downsample_inplane(vol: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """Block-average rows and columns; edges are replicated up to a multiple of ``factor``."""
    D, H, W = vol.shape
    ph, pw = (-H) % factor, (-W) % factor
    v = np.pad(vol, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return v.reshape(D, v.shape[1] // factor, factor, v.shape[2] // factor, factor).mean(axis=(2, 4))


def upsample_nearest_inplane(vol: np.ndarray, shape, factor: int = DOWNSAMPLE) -> np.ndarray:
    up = np.repeat(np.repeat(vol, factor, axis=1), factor, axis=2)
    return up[:, : shape[1], : shape[2]]


def segment_breast(net: UNet3D, t1: np.ndarray) -> np.ndarray:
    """Breast probability at full resolution from the downsampled frame."""
    low = downsample_inplane(np.asarray(t1, dtype=np.float32))
    # frames smaller than the output tile are edge padded and cropped back
    pad = [(0, max(o - n, 0)) for o, n in zip(net.output_tile, low.shape)]
    prob = predict_volume(net, np.pad(low, pad, mode="edge")[None]).data
    prob = prob[tuple(slice(0, n) for n in low.shape)]
    return upsample_nearest_inplane(prob, t1.shape)


def _breast_patches(lows, labels, net: UNet3D, rng, n):
    """Random input patches and one-hot tile targets from reflect-padded frames."""
    inp, out = net.input_patch, net.output_tile
    half = [(i - o) // 2 for i, o in zip(inp, out)]
    xs, ts = [], []
    for _ in range(n):
        k = int(rng.integers(len(lows)))
        x, y = lows[k], labels[k]
        origin = [int(rng.integers(0, max(d - o, 0) + 1)) for d, o in zip(y.shape, out)]
        xp = np.pad(x, [(h, h + max(o - d, 0)) for h, o, d in zip(half, out, x.shape)], mode="reflect")
        yp = np.pad(y, [(0, max(o - d, 0)) for o, d in zip(out, y.shape)], mode="reflect")
        xs.append(xp[tuple(slice(o, o + i) for o, i in zip(origin, inp))][None])
        t = yp[tuple(slice(o, o + s) for o, s in zip(origin, out))]
        ts.append(np.stack([~t, t]).astype(np.float32))
    return np.stack(xs).astype(np.float32), np.stack(ts)


def train_breast_mask_net(net: UNet3D, t1_volumes, breast_masks, iterations: int = 300,
                          batch_size: int = 8, lr: float = 1e-3, seed: int = 0) -> list:
    """Fit ``net`` to whole-frame breast masks at the x4 downsampled grid.

    Targets are block-averaged masks thresholded at 0.5. Returns the loss trace.
    """
    lows = [downsample_inplane(np.asarray(t, dtype=np.float32)) for t in t1_volumes]
    labels = [downsample_inplane(np.asarray(m, dtype=np.float32)) >= 0.5 for m in breast_masks]
    if not lows or len(lows) != len(labels):
        raise ValueError("need one breast mask per T1 volume")
    rng = np.random.default_rng(seed)
    state = AdamState()
    trace = []
    for _ in range(iterations):
        x, t = _breast_patches(lows, labels, net, rng, batch_size)
        net.zero_grad()
        loss = generalized_dice_loss(net.forward(x), t)
        loss.backward()
        adam_step(net.parameters(), state, lr)
        trace.append(float(loss.data))
    return trace
