"""Two-pathway multi-scale patch classifier with an optional prior-map input."""

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
    conv1x1,
    conv3d_valid,
    crop_center,
    init_glorot_uniform,
    init_orthogonal,
    relu,
    softmax_channels,
)
from ..neuro.ops import BILINEAR_KERNEL
from .planner import ShapePlanError

PARAM_BAND = (0.8e6, 1.2e6)


@dataclass
class DeepMedicConfig:
    in_channels: int = 3
    normal_input: tuple = (13, 35, 35)
    context_input: tuple = (13, 75, 75)
    target: tuple = (9, 9)
    widths: tuple = (42, 42, 56, 56, 56, 56, 70, 70)
    # slice extent per pathway conv; the last two are in-plane only
    depth_extents: tuple = (3, 3, 3, 3, 3, 3, 1, 1)
    fc_widths: tuple = (210, 210)
    classes: int = 2
    tpm_enabled: bool = False
    init: str = "orthogonal"
    seed: int = 1
    check_param_band: bool = False

    def __post_init__(self):
        self.normal_input = tuple(int(v) for v in self.normal_input)
        self.context_input = tuple(int(v) for v in self.context_input)
        self.target = tuple(int(v) for v in self.target)
        self.widths = tuple(int(v) for v in self.widths)
        self.depth_extents = tuple(int(v) for v in self.depth_extents)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)
        if len(self.widths) != len(self.depth_extents):
            raise ValueError("one depth extent per pathway conv")


class DeepMedic(NetworkGraph):
    """Normal and context pathways of valid convs feeding three 1x1x1 layers.

    The context patch is average-pooled x2 in-plane inside the graph, run
    through its own pathway, centre-cropped, upsampled x2 with the fixed
    bilinear kernel and cropped to the target so both pathways describe the
    same voxels. With ``tpm_enabled`` the prior probabilities of the target
    are an extra channel of the first 1x1x1 layer.
    """

    def __init__(self, cfg: DeepMedicConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        init = init_orthogonal if cfg.init == "orthogonal" else init_glorot_uniform
        self.kernel_up = self.add_param("upsample.kernel", BILINEAR_KERNEL, trainable=False)
        self.paths = {}
        for path in ("normal", "context"):
            layers = []
            cin = cfg.in_channels
            for i, (co, kd) in enumerate(zip(cfg.widths, cfg.depth_extents)):
                name = f"{path}.conv{i}"
                shape = (co, cin, kd, 3, 3)
                layers.append((self.add_param(f"{name}.w", init(shape, rng)),
                               self.add_param(f"{name}.b", np.zeros(co, np.float32))))
                self.layers.append(LayerSpec(name, "conv", cin, co, (kd, 3, 3)))
                cin = co
            self.paths[path] = layers
        cin = 2 * cfg.widths[-1] + (1 if cfg.tpm_enabled else 0)
        self.fc = []
        for i, co in enumerate(cfg.fc_widths + (cfg.classes,)):
            name = f"fc{i}"
            self.fc.append((self.add_param(f"{name}.w", init((co, cin, 1, 1, 1), rng)),
                            self.add_param(f"{name}.b", np.zeros(co, np.float32))))
            self.layers.append(LayerSpec(name, "conv1x1", cin, co, (1, 1, 1)))
            cin = co
        self._check_shapes()
        if cfg.check_param_band and not PARAM_BAND[0] <= self.n_trainable() <= PARAM_BAND[1]:
            raise ValueError(f"{self.n_trainable()} trainable parameters outside {PARAM_BAND}")

    @property
    def input_patch(self) -> tuple:
        return self.cfg.context_input

    @property
    def output_tile(self) -> tuple:
        return (1,) + self.cfg.target

    def forward_patch(self, x, prior=None) -> Tensor:
        """Take the context-sized patch and cut the normal patch from its centre."""
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        nd, nh, nw = self.cfg.normal_input
        D, H, W = x.shape[2:]
        normal = x[:, :, (D - nd) // 2 : (D - nd) // 2 + nd, (H - nh) // 2 : (H - nh) // 2 + nh,
                   (W - nw) // 2 : (W - nw) // 2 + nw]
        return self.forward(normal, x, prior if self.cfg.tpm_enabled else None)

    def _path_dims(self, dims):
        shrink_d = sum(k - 1 for k in self.cfg.depth_extents)
        shrink_p = 2 * len(self.cfg.widths)
        return dims[0] - shrink_d, dims[1] - shrink_p, dims[2] - shrink_p

    def _check_shapes(self):
        t = self.cfg.target
        nd, nh, nw = self._path_dims(self.cfg.normal_input)
        cd, ch, cw = self.cfg.context_input
        cd, ch, cw = self._path_dims((cd, (ch - 1) // 2, (cw - 1) // 2))
        # context crop so that its x2 upsampling covers the target with an even margin
        self.context_crop = tuple((x + 2) // 2 for x in t)
        ok = (nd == 1 and cd == 1 and nh >= t[0] and nw >= t[1] and (nh - t[0]) % 2 == 0
              and (nw - t[1]) % 2 == 0 and all(c >= k and (c - k) % 2 == 0 for c, k in zip((ch, cw), self.context_crop))
              and all(t_ % 2 == 1 for t_ in t))
        if not ok:
            raise ShapePlanError(
                f"pathway outputs normal={(nd, nh, nw)} context={(cd, ch, cw)} cannot form target {t}")

    def _pathway(self, x, path):
        for k, b in self.paths[path]:
            x = relu(conv3d_valid(x, k, b))
        return x

    def logits(self, normal, context, tpm=None) -> Tensor:
        normal = normal if isinstance(normal, Tensor) else Tensor(normal)
        context = context if isinstance(context, Tensor) else Tensor(context)
        t = self.cfg.target
        a = crop_center(self._pathway(normal, "normal"), (1,) + t)
        c = avg_pool3_s2(context, axes=INPLANE)
        c = crop_center(self._pathway(c, "context"), (1,) + self.context_crop)
        c = crop_center(bilinear_up_x2(c, self.kernel_up, axes=INPLANE), (1,) + t)
        parts = [a, c]
        if self.cfg.tpm_enabled:
            if tpm is None:
                raise ValueError("tpm_enabled graph needs prior probabilities for the target")
            parts.append(tpm if isinstance(tpm, Tensor) else Tensor(np.asarray(tpm, dtype=a.data.dtype)))
        x = concat_channels(*parts)
        for i, (k, b) in enumerate(self.fc):
            x = conv1x1(x, k, b)
            if i < len(self.fc) - 1:
                x = relu(x)
        return x

    def forward(self, normal, context, tpm=None) -> Tensor:
        return softmax_channels(self.logits(normal, context, tpm))


def build_deepmedic(cfg: DeepMedicConfig | None = None) -> DeepMedic:
    return DeepMedic(cfg or DeepMedicConfig(check_param_band=True))
