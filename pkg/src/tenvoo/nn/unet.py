"""Three-level 3D U-Net noise predictor with adapter attachment.

Layout for widths ``(w0, w1, w2)`` and an input ``[n, 1, D, H, W]``::

    in_conv                      1 -> w0                @ D
    down.0: 2 x ResBlock(w0), stride-2 conv             @ D   -> D/2
    down.1: ResBlock(w0->w1), ResBlock(w1), stride-2    @ D/2 -> D/4
    mid:    ResBlock(w1->w2), ResBlock(w2), attention   @ D/4
    up.1:   conv w2->w1, 2x nearest, concat skip,
            ResBlock(2w1->w1), ResBlock(w1)             @ D/2
    up.0:   conv w1->w0, 2x nearest, concat skip,
            ResBlock(2w0->w0), ResBlock(w0)             @ D
    out:    GroupNorm, SiLU, conv w0 -> 1

Each ResBlock adds a projection of the time embedding after its first
convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..adapters import (
    CONV_KINDS,
    AdapterError,
    AdapterKind,
    build_adapter,
    init_adapter,
    param_count,
)
from ..autodiff import Node
from .layers import Conv3d, GroupNorm, Linear, Module, time_embedding, upsample_nearest

__all__ = ["ResBlock", "Attention", "UNetLite", "unet_forward", "attach_adapters",
           "AttachReport", "TARGETS"]

TARGETS = ("resnet_conv", "attn_query", "attn_value", "time_embed", "time_proj")


class ResBlock(Module):
    def __init__(self, name, c_in, c_out, t_dim, groups, rng):
        self.norm1 = GroupNorm(f"{name}.norm1", c_in, groups)
        self.conv1 = Conv3d(f"{name}.conv1", c_in, c_out, 3, rng=rng)
        self.time_proj = Linear(f"{name}.time_proj", t_dim, c_out, rng=rng)
        self.norm2 = GroupNorm(f"{name}.norm2", c_out, groups)
        self.conv2 = Conv3d(f"{name}.conv2", c_out, c_out, 3, rng=rng)
        self.skip = Conv3d(f"{name}.skip", c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def convs(self):
        return [c for c in (self.conv1, self.conv2, self.skip) if c is not None]

    def __call__(self, x, temb) -> Node:
        h = self.conv1(ad.silu(self.norm1(x)))
        tp = self.time_proj(ad.silu(temb))
        h = ad.add(h, ad.reshape(tp, tp.shape + (1, 1, 1)))
        h = self.conv2(ad.silu(self.norm2(h)))
        return ad.add(h, x if self.skip is None else self.skip(x))


class Attention(Module):
    """Single-head self-attention over flattened voxels."""

    def __init__(self, name, channels, groups, rng):
        self.norm = GroupNorm(f"{name}.norm", channels, groups)
        self.query = Linear(f"{name}.query", channels, channels, rng=rng)
        self.key = Linear(f"{name}.key", channels, channels, rng=rng)
        self.value = Linear(f"{name}.value", channels, channels, rng=rng)
        self.proj = Linear(f"{name}.proj", channels, channels, rng=rng)

    def __call__(self, x) -> Node:
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        h = ad.transpose(ad.reshape(self.norm(x), (n, c, -1)), (0, 2, 1))
        q, k, v = self.query(h), self.key(h), self.value(h)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c))
        out = self.proj(ad.matmul(ad.softmax(scores, axis=-1), v))
        out = ad.reshape(ad.transpose(out, (0, 2, 1)), (n, c) + spatial)
        return ad.add(x, out)


class UNetLite(Module):
    def __init__(self, widths=(8, 16, 128), time_dim: int = 32, groups: int = 4,
                 blocks_per_level: int = 2, seed: int = 0, T: int | None = None):
        if len(widths) != 3:
            raise ValueError("UNetLite uses exactly three resolution levels")
        w0, w1, w2 = widths
        self.widths = tuple(widths)
        self.time_dim = time_dim
        self.T = T
        rng = np.random.default_rng(seed)
        t_hidden = 2 * time_dim
        self.time_embed = [Linear("time_embed.0", time_dim, t_hidden, rng=rng),
                           Linear("time_embed.1", t_hidden, t_hidden, rng=rng)]
        self.in_conv = Conv3d("in_conv", 1, w0, 3, rng=rng)

        def blocks(name, c_in, c_out):
            out = [ResBlock(f"{name}.0", c_in, c_out, t_hidden, groups, rng)]
            out += [ResBlock(f"{name}.{j}", c_out, c_out, t_hidden, groups, rng)
                    for j in range(1, blocks_per_level)]
            return out

        self.down0 = blocks("down.0.res", w0, w0)
        self.downsample0 = Conv3d("down.0.downsample", w0, w0, 3, stride=2, rng=rng)
        self.down1 = blocks("down.1.res", w0, w1)
        self.downsample1 = Conv3d("down.1.downsample", w1, w1, 3, stride=2, rng=rng)
        self.mid = blocks("mid.res", w1, w2)
        self.attn = Attention("mid.attn", w2, groups, rng)
        self.upconv1 = Conv3d("up.1.upconv", w2, w1, 3, rng=rng)
        self.up1 = blocks("up.1.res", 2 * w1, w1)
        self.upconv0 = Conv3d("up.0.upconv", w1, w0, 3, rng=rng)
        self.up0 = blocks("up.0.res", 2 * w0, w0)
        self.out_norm = GroupNorm("out.norm", w0, groups)
        self.out_conv = Conv3d("out.conv", w0, 1, 3, rng=rng)

    def res_blocks(self) -> list[ResBlock]:
        return self.down0 + self.down1 + self.mid + self.up1 + self.up0

    def attentions(self) -> list[Attention]:
        return [self.attn]

    def set_adapter_mode(self, mode: str) -> None:
        for _, mod in self.named_modules():
            if mod is not self and hasattr(mod, "set_adapter_mode"):
                mod.set_adapter_mode(mode)

    def __call__(self, x, t) -> Node:
        return unet_forward(self, x, t)


def unet_forward(model: UNetLite, x, t) -> Node:
    """Predict the noise in ``x`` (``[n, 1, D, H, W]``) at 0-based step(s) ``t``."""
    x = ad.lift(x)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected input [n, 1, D, H, W], got {x.shape}")
    if any(s % 4 for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by 4")
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    temb = ad.lift(time_embedding(t, model.time_dim, model.T))
    temb = model.time_embed[1](ad.silu(model.time_embed[0](temb)))

    h = model.in_conv(x)
    for blk in model.down0:
        h = blk(h, temb)
    skip0 = h
    h = model.downsample0(h)
    for blk in model.down1:
        h = blk(h, temb)
    skip1 = h
    h = model.downsample1(h)
    for blk in model.mid:
        h = blk(h, temb)
    h = model.attn(h)
    h = upsample_nearest(model.upconv1(h))
    h = ad.concat([h, skip1], axis=1)
    for blk in model.up1:
        h = blk(h, temb)
    h = upsample_nearest(model.upconv0(h))
    h = ad.concat([h, skip0], axis=1)
    for blk in model.up0:
        h = blk(h, temb)
    return model.out_conv(ad.silu(model.out_norm(h)))


@dataclass
class AttachReport:
    kind: str
    rank: int
    joint: bool
    layers: list[tuple[str, str, int]]
    adapter_params: int
    base_params: int
    trainable_params: int

    @property
    def fraction(self) -> float:
        return self.adapter_params / self.base_params


def _target_layers(model: UNetLite, target: str):
    if target == "resnet_conv":
        return [c for blk in model.res_blocks() for c in blk.convs()]
    if target == "attn_query":
        return [a.query for a in model.attentions()]
    if target == "attn_value":
        return [a.value for a in model.attentions()]
    if target == "time_embed":
        return list(model.time_embed)
    if target == "time_proj":
        return [blk.time_proj for blk in model.res_blocks()]
    raise AdapterError(f"unknown target {target!r}; choose from {TARGETS}")


def attach_adapters(model: UNetLite, kind, rank: int, targets=TARGETS, joint: bool = False,
                    seed: int = 0, scaling: float = 1.0, std_exponent: float = 0.5) -> AttachReport:
    """Attach adapters to the target layers and set trainable flags.

    Convolutions get ``kind``; linear targets get QuantaLinear adapters.
    Without ``joint`` only adapter cores train. With ``joint`` the
    layers that carry no adapter train as well.
    """
    kind = AdapterKind.parse(kind)
    if kind not in CONV_KINDS:
        raise AdapterError(f"{kind.value} cannot adapt 3D convolutions; use one of "
                           f"{[k.value for k in CONV_KINDS]}")
    layers = []
    for target in targets:
        for layer in _target_layers(model, target):
            if layer not in layers:
                layers.append(layer)
    base = model.base_parameters()
    for p in base.values():
        p.trainable = False
    report_layers = []
    for idx, layer in enumerate(layers):
        prefix = layer.weight.name[: -len("weight")] + "adapter."
        layer_kind = kind if isinstance(layer, Conv3d) else AdapterKind.QUANTA_LINEAR
        state = build_adapter(layer_kind, layer.weight.shape, rank, prefix, scaling)
        layer_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        init_adapter(state, layer_seed, std_exponent)
        layer.attach(state)
        report_layers.append((layer.weight.name[: -len(".weight")], layer_kind.value, param_count(state)))
    if joint:
        adapted = {id(l) for l in layers}
        for _, mod in model.named_modules():
            if id(mod) in adapted:
                continue
            for p in mod.own_parameters():
                p.trainable = True
    n_adapter = sum(c for _, _, c in report_layers)
    n_base = sum(p.value.size for p in base.values())
    n_train = sum(p.value.size for p in model.trainable_parameters().values())
    return AttachReport(kind.value, rank, joint, report_layers, n_adapter, n_base, n_train)
