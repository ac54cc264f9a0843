"""Valid-padding 3D U-Net with fixed-kernel pooling and upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..neuro import (
    INPLANE,
    LayerSpec,
    NetworkGraph,
    Tensor,
    avg_pool3_s2,
    bilinear_up_x2,
    concat_channels,
    concat_crop,
    conv1x1,
    conv3d_valid,
    init_glorot_uniform,
    init_orthogonal,
    relu,
    softmax_channels,
)
from ..neuro.ops import BILINEAR_KERNEL
from .planner import ShapePlanError, plan_depth, plan_inplane

PARAM_BAND = (2.5e6, 3.5e6)


@dataclass
class UNet3DConfig:
    in_channels: int = 3
    base_channels: int = 42
    levels: int = 4
    input_patch: tuple = (19, 75, 75)
    output_tile: tuple = (1, 37, 37)
    classes: int = 2
    prior_channel: bool = False
    init: str = "glorot"
    seed: int = 1
    # only enforced for the full-size default network
    check_param_band: bool = False

    def __post_init__(self):
        self.input_patch = tuple(int(v) for v in self.input_patch)
        self.output_tile = tuple(int(v) for v in self.output_tile)
        if len(self.input_patch) != 3 or len(self.output_tile) != 3:
            raise ValueError("input_patch and output_tile are (slices, rows, cols)")
        if self.base_channels < 1 or self.levels < 1 or self.classes < 2 or self.in_channels < 1:
            raise ValueError("invalid U-Net width, depth or class count")


class UNet3D(NetworkGraph):
    """Encoder of ``levels`` blocks (2 convs, then in-plane pooling) and a
    mirrored decoder (in-plane x2 upsampling, skip concat-crop, 2 convs).

    Widths are ``base * 2**level`` on both sides. A 1x1x1 classifier and a
    channel softmax follow the last block; with ``prior_channel`` an extra
    input map of the output-tile size is stacked in just before it.
    """

    def __init__(self, cfg: UNet3DConfig):
        super().__init__()
        self.cfg = cfg
        D, H, W = cfg.input_patch
        d, h, w = cfg.output_tile
        ext_h = plan_inplane(H, h, cfg.levels)
        ext_w = plan_inplane(W, w, cfg.levels)
        ext_d = plan_depth(D, d, tuple(max(a, b) for a, b in zip(ext_h, ext_w)))
        self.extents = tuple(zip(ext_d, ext_h, ext_w))
        rng = np.random.default_rng(cfg.seed)
        init = init_glorot_uniform if cfg.init == "glorot" else init_orthogonal
        self.kernel_up = self.add_param("upsample.kernel", BILINEAR_KERNEL, trainable=False)
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        convs = []
        cin = cfg.in_channels
        for lvl in range(cfg.levels):
            for j in range(2):
                convs.append((f"down{lvl}.conv{j}", cin, widths[lvl]))
                cin = widths[lvl]
        for lvl in reversed(range(cfg.levels)):
            cin = cin + widths[lvl]
            for j in range(2):
                convs.append((f"up{lvl}.conv{j}", cin, widths[lvl]))
                cin = widths[lvl]
        self._convs = []
        for (name, ci, co), k in zip(convs, self.extents):
            shape = (co, ci) + tuple(k)
            self._convs.append((self.add_param(f"{name}.w", init(shape, rng)),
                                self.add_param(f"{name}.b", np.zeros(co, np.float32))))
            self.layers.append(LayerSpec(name, "conv", ci, co, tuple(k)))
        ci = cin + (1 if cfg.prior_channel else 0)
        self.cls_w = self.add_param("classifier.w", init((cfg.classes, ci, 1, 1, 1), rng))
        self.cls_b = self.add_param("classifier.b", np.zeros(cfg.classes, np.float32))
        self.layers.append(LayerSpec("classifier", "classifier", ci, cfg.classes, (1, 1, 1)))
        out = self.output_shape(1)[2:]
        if out != cfg.output_tile:
            raise ShapePlanError(f"planned network yields {out}, expected {cfg.output_tile}")
        if cfg.check_param_band and not PARAM_BAND[0] <= self.n_trainable() <= PARAM_BAND[1]:
            raise ValueError(f"{self.n_trainable()} trainable parameters outside {PARAM_BAND}")

    @property
    def input_patch(self) -> tuple:
        return self.cfg.input_patch

    @property
    def output_tile(self) -> tuple:
        return self.cfg.output_tile

    def forward_patch(self, x, prior=None) -> Tensor:
        """Uniform entry point used by training and tiled inference."""
        return self.forward(x, prior if self.cfg.prior_channel else None)

    def output_shape(self, batch: int) -> tuple:
        D, H, W = self.cfg.input_patch
        dims = np.array([D, H, W])
        it = iter(self.extents)
        skips = []
        for _ in range(self.cfg.levels):
            for _ in range(2):
                dims = dims - np.array(next(it)) + 1
            skips.append(dims.copy())
            dims[1:] = (dims[1:] - 1) // 2
        for _ in range(self.cfg.levels):
            dims[1:] = 2 * dims[1:] + 1
            for _ in range(2):
                dims = dims - np.array(next(it)) + 1
        return (batch, self.cfg.classes) + tuple(int(v) for v in dims)

    def logits(self, x, prior=None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != (self.cfg.in_channels,) + self.cfg.input_patch:
            raise ValueError(f"input shape {x.shape[1:]} != {(self.cfg.in_channels,) + self.cfg.input_patch}")
        convs = iter(self._convs)
        skips = []
        for _ in range(self.cfg.levels):
            for _ in range(2):
                k, b = next(convs)
                x = relu(conv3d_valid(x, k, b))
            skips.append(x)
            x = avg_pool3_s2(x, axes=INPLANE)
        for lvl in reversed(range(self.cfg.levels)):
            x = bilinear_up_x2(x, self.kernel_up, axes=INPLANE)
            x = concat_crop(skips[lvl], x)
            for _ in range(2):
                k, b = next(convs)
                x = relu(conv3d_valid(x, k, b))
        if self.cfg.prior_channel:
            if prior is None:
                raise ValueError("this network expects a prior-mask channel")
            prior = prior if isinstance(prior, Tensor) else Tensor(np.asarray(prior, dtype=x.data.dtype))
            x = concat_channels(x, prior)
        return conv1x1(x, self.cls_w, self.cls_b)

    def forward(self, x, prior=None) -> Tensor:
        return softmax_channels(self.logits(x, prior))


def build_unet3d(cfg: UNet3DConfig | None = None) -> UNet3D:
    return UNet3D(cfg or UNet3DConfig(check_param_band=True))
