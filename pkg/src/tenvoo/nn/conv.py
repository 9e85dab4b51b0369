"""Direct 3D correlation with hand-written backward passes.

The forward pass unfolds the padded input into patch columns and runs
one matrix product per batch element. The input gradient is a full
correlation of the (stride-dilated) output gradient with the flipped,
channel-transposed kernel. The weight gradient multiplies the output
gradient against the cached patch columns.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..autodiff import Node, lift, record

__all__ = ["conv3d", "conv3d_forward", "conv3d_input_grad", "conv3d_weight_grad", "output_extent"]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def output_extent(size, k, stride, pad) -> tuple[int, ...]:
    out = tuple((n + 2 * p - kk) // s + 1 for n, kk, s, p in zip(size, k, stride, pad))
    if any(o < 1 for o in out):
        raise ValueError(f"empty output extent {out} for input {size}, kernel {k}")
    return out


def _columns(x, k, stride, pad):
    n, c = x.shape[:2]
    if any(pad):
        x = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    win = sliding_window_view(x, k, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]]
    od, oh, ow = win.shape[2:5]
    # [n, c, kd, kh, kw, od, oh, ow] -> [n, c*kd*kh*kw, od*oh*ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return cols.reshape(n, c * k[0] * k[1] * k[2], od * oh * ow), (od, oh, ow)


def _check(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")


def conv3d_forward(x, w, b=None, stride=1, padding=0, return_cols=False):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check(x, w)
    stride, padding = _triple(stride), _triple(padding)
    k = w.shape[2:]
    output_extent(x.shape[2:], k, stride, padding)
    cols, ext = _columns(x, k, stride, padding)
    w2 = w.reshape(w.shape[0], -1)
    y = np.matmul(w2, cols).reshape((x.shape[0], w.shape[0]) + ext)
    if b is not None:
        y += np.asarray(b).reshape(1, -1, 1, 1, 1)
    return (y, cols) if return_cols else y


def conv3d_weight_grad(x, g, kshape, stride=1, padding=0, cols=None):
    stride, padding = _triple(stride), _triple(padding)
    if cols is None:
        cols, _ = _columns(np.asarray(x, dtype=np.float64), kshape[2:], stride, padding)
    g2 = g.reshape(g.shape[0], g.shape[1], -1)
    gw = np.matmul(g2[0], cols[0].T)
    for j in range(1, g.shape[0]):
        gw += np.matmul(g2[j], cols[j].T)
    return gw.reshape(kshape)


def conv3d_input_grad(g, w, xshape, stride=1, padding=0):
    """Full correlation of the output gradient with the flipped kernel."""
    stride, padding = _triple(stride), _triple(padding)
    k = w.shape[2:]
    if any(p > kk - 1 for p, kk in zip(padding, k)):
        return _input_grad_scatter(g, w, xshape, stride, padding)
    n, co = g.shape[:2]
    out_sp = g.shape[2:]
    if stride != (1, 1, 1):
        dil = np.zeros((n, co) + tuple((o - 1) * s + 1 for o, s in zip(out_sp, stride)))
        dil[:, :, ::stride[0], ::stride[1], ::stride[2]] = g
        g = dil
    extra = [(n_in + 2 * p - kk) % s for n_in, p, kk, s in zip(xshape[2:], padding, k, stride)]
    pads = ((0, 0), (0, 0)) + tuple(
        (kk - 1 - p, kk - 1 - p + e) for kk, p, e in zip(k, padding, extra))
    g = np.pad(g, pads)
    wf = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return conv3d_forward(g, wf)


def _input_grad_scatter(g, w, xshape, stride, padding):
    n, c = xshape[:2]
    kd, kh, kw = w.shape[2:]
    od, oh, ow = g.shape[2:]
    w2 = w.reshape(w.shape[0], -1)
    gcols = np.matmul(w2.T, g.reshape(n, g.shape[1], -1))
    gcols = gcols.reshape(n, c, kd, kh, kw, od, oh, ow)
    padded = tuple(s + 2 * p for s, p in zip(xshape[2:], padding))
    gx = np.zeros((n, c) + padded)
    sd, sh, sw = stride
    for a in range(kd):
        for bb in range(kh):
            for cc in range(kw):
                gx[:, :, a:a + sd * od:sd, bb:bb + sh * oh:sh, cc:cc + sw * ow:sw] += gcols[:, :, a, bb, cc]
    pd, ph, pw = padding
    return gx[:, :, pd:pd + xshape[2], ph:ph + xshape[3], pw:pw + xshape[4]]


def conv3d(x, w, b=None, stride=1, padding=0) -> Node:
    """Recorded 3D correlation ``y = w * x + b`` on ``[n, c, D, H, W]`` inputs."""
    x, w = lift(x), lift(w)
    inputs = (x, w) if b is None else (x, w, lift(b))
    need_cols = w.requires_grad
    y, cols = conv3d_forward(x.value, w.value, None if b is None else inputs[2].value,
                             stride, padding, return_cols=True)
    if not need_cols:
        cols = None

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = conv3d_input_grad(g, w.value, x.shape, stride, padding)
        if w.requires_grad:
            gw = conv3d_weight_grad(x.value, g, w.shape, stride, padding, cols=cols)
        if b is not None and inputs[2].requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(y, "conv3d", inputs, bw)
