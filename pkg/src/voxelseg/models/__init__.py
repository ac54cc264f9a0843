"""Network builders, tissue prior maps and CRF post-processing."""

from .breastmask import (BreastMaskConfig, build_breast_mask_net, downsample_inplane, segment_breast,
                         train_breast_mask_net)
from .crf import CrfParams, apply_crf
from .deepmedic import DeepMedic, DeepMedicConfig, build_deepmedic
from .planner import ShapePlanError, plan_depth, plan_inplane
from .tpm import TissueProbabilityMap, build_tpm, center_of_mass_align
from .unet import UNet3D, UNet3DConfig, build_unet3d

__all__ = [
    "BreastMaskConfig", "CrfParams", "DeepMedic", "DeepMedicConfig", "ShapePlanError",
    "TissueProbabilityMap", "UNet3D", "UNet3DConfig", "apply_crf", "build_breast_mask_net",
    "build_deepmedic", "build_tpm", "build_unet3d", "center_of_mass_align", "downsample_inplane",
    "plan_depth", "plan_inplane", "segment_breast", "train_breast_mask_net",
]


def layer_census(graph) -> list:
    """``(name, kind, in, out, kernel)`` rows in construction order."""
    return [(l.name, l.kind, l.in_channels, l.out_channels, l.kernel) for l in graph.layers]
