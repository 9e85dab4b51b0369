"""Layers, the U-Net-lite noise predictor and adapter attachment."""

from .conv import conv3d, conv3d_forward, conv3d_input_grad, conv3d_weight_grad
from .layers import (
    ADAPTER_MODES,
    Conv3d,
    GroupNorm,
    Linear,
    Module,
    group_norm,
    time_embedding,
    upsample_nearest,
)
from .unet import TARGETS, Attention, AttachReport, ResBlock, UNetLite, attach_adapters, unet_forward

__all__ = [
    "conv3d", "conv3d_forward", "conv3d_input_grad", "conv3d_weight_grad",
    "ADAPTER_MODES", "Conv3d", "GroupNorm", "Linear", "Module", "group_norm",
    "time_embedding", "upsample_nearest", "TARGETS", "Attention", "AttachReport",
    "ResBlock", "UNetLite", "attach_adapters", "unet_forward",
]
