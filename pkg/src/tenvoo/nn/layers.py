"""Parameterized layers built on the autodiff ops."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import autodiff as ad
from ..adapters import AdapterError, AdapterState, delta_node, merge
from ..autodiff import Node, Parameter, record
from .conv import conv3d, output_extent

__all__ = [
    "Module", "Conv3d", "Linear", "GroupNorm", "group_norm", "upsample_nearest",
    "time_embedding", "ADAPTER_MODES",
]

ADAPTER_MODES = ("merge", "two_pass", "merged_kernel")


class Module:
    """Minimal container: parameters and sub-modules found by attribute walk."""

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}.{key}" if prefix else key)
            elif isinstance(val, (list, tuple)):
                for j, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}.{key}.{j}" if prefix else f"{key}.{j}")

    def own_parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]

    def base_parameters(self) -> dict[str, Parameter]:
        out = {}
        for _, mod in self.named_modules():
            for p in mod.own_parameters():
                out[p.name] = p
        return out

    def adapter_parameters(self) -> dict[str, Parameter]:
        out = {}
        for _, mod in self.named_modules():
            st = getattr(mod, "adapter", None)
            if st is not None:
                for p in st.parameters():
                    out[p.name] = p
        return out

    def parameters(self) -> dict[str, Parameter]:
        out = self.base_parameters()
        out.update(self.adapter_parameters())
        return out

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if p.trainable}


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class _Adaptable(Module):
    adapter: AdapterState | None
    adapter_mode: str
    _merged_cache: np.ndarray | None

    def attach(self, state: AdapterState) -> None:
        if tuple(state.kernel_shape) != self.weight.shape:
            raise AdapterError(
                f"{self.weight.name}: adapter shape {state.kernel_shape} != weight {self.weight.shape}"
            )
        self.adapter = state
        self._merged_cache = None

    def set_adapter_mode(self, mode: str) -> None:
        if mode not in ADAPTER_MODES:
            raise ValueError(f"adapter mode must be one of {ADAPTER_MODES}")
        self.adapter_mode = mode
        self._merged_cache = None

    def effective_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.weight.value
        return merge(self.weight.value, self.adapter)

    def _kernel(self):
        if self.adapter is None:
            return self.weight
        if self.adapter_mode == "merged_kernel":
            if self._merged_cache is None:
                self._merged_cache = self.effective_weight()
            return self._merged_cache
        return ad.add(self.weight, delta_node(self.adapter))


class Conv3d(_Adaptable):
    def __init__(self, name: str, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(c_in * k**3)
        self.weight = Parameter(f"{name}.weight", _uniform(rng, bound, (c_out, c_in, k, k, k)))
        self.bias = Parameter(f"{name}.bias", _uniform(rng, bound, (c_out,)))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.adapter = None
        self.adapter_mode = "merge"
        self._merged_cache = None

    def out_shape(self, in_shape):
        k = self.weight.shape[2:]
        ext = output_extent(in_shape[2:], k, (self.stride,) * 3, (self.padding,) * 3)
        return (in_shape[0], self.weight.shape[0]) + ext

    def __call__(self, x) -> Node:
        if self.adapter is not None and self.adapter_mode == "two_pass":
            y = conv3d(x, self.weight, self.bias, self.stride, self.padding)
            return ad.add(y, conv3d(x, delta_node(self.adapter), None, self.stride, self.padding))
        return conv3d(x, self._kernel(), self.bias, self.stride, self.padding)


class Linear(_Adaptable):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(f"{name}.weight", _uniform(rng, bound, (d_out, d_in)))
        self.bias = Parameter(f"{name}.bias", _uniform(rng, bound, (d_out,)))
        self.adapter = None
        self.adapter_mode = "merge"
        self._merged_cache = None

    def __call__(self, x) -> Node:
        if self.adapter is not None and self.adapter_mode == "two_pass":
            y = ad.matmul(x, ad.transpose(self.weight, (1, 0)))
            y = ad.add(y, ad.matmul(x, ad.transpose(delta_node(self.adapter), (1, 0))))
            return ad.add(y, self.bias)
        return ad.add(ad.matmul(x, ad.transpose(self._kernel(), (1, 0))), self.bias)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Node:
    x, gamma, beta = ad.lift(x), ad.lift(gamma), ad.lift(beta)
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xs = x.value.reshape(n, groups, -1)
    mu = xs.mean(axis=-1, keepdims=True)
    var = xs.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat_g = (xs - mu) * rstd
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    y = xhat * gamma.value.reshape(bshape) + beta.value.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != 1)

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            gxh = (g * gamma.value.reshape(bshape)).reshape(n, groups, -1)
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                         - xhat_g * (gxh * xhat_g).mean(axis=-1, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return record(y, "group_norm", (x, gamma, beta), bw)


class GroupNorm(Module):
    def __init__(self, name: str, channels: int, groups: int = 4, eps: float = 1e-5):
        self.groups = groups if channels % groups == 0 else 1
        self.eps = eps
        self.weight = Parameter(f"{name}.weight", np.ones(channels))
        self.bias = Parameter(f"{name}.bias", np.zeros(channels))

    def __call__(self, x) -> Node:
        return group_norm(x, self.weight, self.bias, self.groups, self.eps)


def upsample_nearest(x, factor: int = 2) -> Node:
    x = ad.lift(x)
    v = x.value
    for ax in (2, 3, 4):
        v = np.repeat(v, factor, axis=ax)
    n, c, d, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)

    return record(v, "upsample", (x,), bw)


def time_embedding(t, dim: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal embedding with sin/cos interleaved at frequencies ``10000^(-2j/dim)``."""
    t_arr = np.atleast_1d(np.asarray(t))
    if T is not None and (np.any(t_arr < 0) or np.any(t_arr >= T)):
        raise ValueError(f"time index {t} outside [0, {T})")
    if dim % 2:
        raise ValueError("embedding dim must be even")
    j = np.arange(dim // 2)
    freqs = 10000.0 ** (-2.0 * j / dim)
    ang = t_arr[:, None].astype(np.float64) * freqs[None, :]
    emb = np.empty((t_arr.size, dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb[0] if np.ndim(t) == 0 else emb
