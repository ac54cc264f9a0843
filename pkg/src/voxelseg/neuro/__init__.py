"""Minimal tensor engine: the layer set, loss and optimizer the networks need."""

from .checkpoint import load_parameters, save_parameters
from .gradcheck import grad_check
from .graph import LayerSpec, NetworkGraph
from .init import init_glorot_uniform, init_orthogonal
from .ops import (
    INPLANE,
    SPATIAL,
    avg_pool3_s2,
    bilinear_up_x2,
    concat_channels,
    concat_crop,
    conv1x1,
    conv3d_valid,
    crop_center,
    generalized_dice_loss,
    relu,
    slice_channels,
    softmax_channels,
    weighted_sum,
)
from .optim import AdamState, MissingGradError, adam_step
from .tensor import NonFiniteError, Parameter, Tensor, no_grad

__all__ = [
    "AdamState", "INPLANE", "LayerSpec", "MissingGradError", "NetworkGraph", "NonFiniteError",
    "Parameter", "SPATIAL", "Tensor", "adam_step", "avg_pool3_s2", "bilinear_up_x2",
    "concat_channels", "concat_crop", "conv1x1", "conv3d_valid", "crop_center",
    "generalized_dice_loss", "grad_check", "init_glorot_uniform", "init_orthogonal",
    "load_parameters", "no_grad", "relu", "save_parameters", "slice_channels",
    "softmax_channels", "weighted_sum",
]
