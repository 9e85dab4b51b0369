"""Volume-set metrics: 3D MS-SSIM, kernel MMD on random conv features, MSE.

MS-SSIM uses a separable 7-tap Gaussian window (sigma 1.5) with valid
filtering and 2x average pooling between scales. Contrast-structure terms
that go negative are raised to their exponent with the sign kept, so
anti-correlated volumes score below zero instead of producing NaN.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .nn.conv import conv3d_forward

__all__ = [
    "MS_SSIM_WEIGHTS",
    "gaussian_window",
    "ms_ssim_3d",
    "pairwise_ms_ssim",
    "nearest_real_ms_ssim",
    "nearest_real_mse",
    "RandomConvEncoder",
    "mmd_from_features",
    "mmd",
    "MetricReport",
    "evaluate",
    "PROTOCOLS",
]

log = logging.getLogger(__name__)

_BASE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_WEIGHTS = tuple(w / sum(_BASE_WEIGHTS[:3]) for w in _BASE_WEIGHTS[:3])
PROTOCOLS = ("pairwise", "nearest_real")


@lru_cache(maxsize=8)
def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def _filter(v, win):
    for ax in range(3):
        v = correlate1d(v, win, axis=ax, mode="constant")
    h = len(win) // 2
    return v[h:-h, h:-h, h:-h] if h else v


def _pool2(v):
    d, h, w = (s // 2 * 2 for s in v.shape)
    v = v[:d, :h, :w]
    return v.reshape(d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(1, 3, 5))


def _ssim_terms(a, b, win, c1, c2):
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    saa = _filter(a * a, win) - mu_a * mu_a
    sbb = _filter(b * b, win) - mu_b * mu_b
    sab = _filter(a * b, win) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * sab + c2) / (saa + sbb + c2)
    return float(lum.mean()), float(cs.mean())


def _signed_pow(x, w):
    return np.sign(x) * abs(x) ** w


def ms_ssim_3d(a, b, scales: int = 3, window: int = 7, sigma: float = 1.5,
               data_range: float | None = None, weights: Sequence[float] | None = None) -> float:
    """Multi-scale SSIM between two volumes.

    ``data_range`` defaults to the joint value range of ``a`` and ``b``
    (1.0 if both are the same constant).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected 3-d volumes, got {a.ndim}-d")
    need = window * 2 ** (scales - 1)
    if min(a.shape) < need:
        raise ValueError(f"volume {a.shape} too small for {scales} scales (need >= {need})")
    if weights is None:
        if scales != 3:
            w = np.array(_BASE_WEIGHTS[:scales])
            weights = tuple(w / w.sum())
        else:
            weights = MS_SSIM_WEIGHTS
    if data_range is None:
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        data_range = float(hi - lo) or 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window(window, sigma)
    value = 1.0
    for s in range(scales):
        lum, cs = _ssim_terms(a, b, win, c1, c2)
        term = lum * cs if s == scales - 1 else cs
        value *= _signed_pow(term, weights[s])
        if s < scales - 1:
            a, b = _pool2(a), _pool2(b)
    return float(value)


def _pairs(n: int, max_pairs: int, seed: int):
    pairs = list(itertools.combinations(range(n), 2))
    if len(pairs) > max_pairs:
        pick = np.random.default_rng(seed).choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    return pairs


def pairwise_ms_ssim(volumes: Sequence, max_pairs: int = 100, seed: int = 0, **kw) -> float:
    """Mean MS-SSIM over unordered pairs (a seeded subsample beyond ``max_pairs``)."""
    if len(volumes) < 2:
        raise ValueError("pairwise MS-SSIM needs at least 2 volumes")
    vals = [ms_ssim_3d(volumes[i], volumes[j], **kw) for i, j in _pairs(len(volumes), max_pairs, seed)]
    return float(np.mean(vals))


def nearest_real_ms_ssim(generated: Sequence, real: Sequence, **kw) -> float:
    """Mean over generated volumes of the best MS-SSIM against any real volume."""
    if not generated or not real:
        raise ValueError("both sets must be non-empty")
    return float(np.mean([max(ms_ssim_3d(g, r, **kw) for r in real) for g in generated]))


def nearest_real_mse(generated: Sequence, real: Sequence) -> float:
    if not generated or not real:
        raise ValueError("both sets must be non-empty")
    out = []
    for g in generated:
        g = np.asarray(g, dtype=np.float64)
        out.append(min(float(np.mean((g - np.asarray(r, dtype=np.float64)) ** 2)) for r in real))
    return float(np.mean(out))


class RandomConvEncoder:
    """Fixed random feature map: three stride-2 3x3x3 convs with ReLU, then global average pool."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64)):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c in channels:
            std = np.sqrt(2.0 / (c_in * 27))
            self.weights.append(rng.standard_normal((c, c_in, 3, 3, 3)) * std)
            c_in = c
        self.dim = c_in

    def __call__(self, volumes: Sequence) -> np.ndarray:
        x = np.stack([np.asarray(v, dtype=np.float64) for v in volumes])[:, None]
        for w in self.weights:
            x = np.maximum(conv3d_forward(x, w, stride=2, padding=1), 0.0)
        return x.mean(axis=(2, 3, 4))


def _sq_dists(z):
    diff = z[:, None, :] - z[None, :, :]
    return np.sum(diff * diff, axis=-1)


def mmd_from_features(fx, fy, unbiased: bool = True, bandwidth: float | None = None):
    """Squared MMD with an RBF kernel; returns ``(estimate, bandwidth)``.

    The bandwidth defaults to the median distance among distinct pooled
    pairs. The unbiased form drops within-set diagonals and needs two
    samples per set; with fewer it falls back to the biased form.
    """
    fx = np.atleast_2d(np.asarray(fx, dtype=np.float64))
    fy = np.atleast_2d(np.asarray(fy, dtype=np.float64))
    m, n = len(fx), len(fy)
    if m == 0 or n == 0:
        raise ValueError("MMD needs non-empty sets")
    d2 = _sq_dists(np.concatenate([fx, fy]))
    if bandwidth is None:
        iu = np.triu_indices(m + n, k=1)
        med = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 0.0
        bandwidth = med if med > 0 else 1.0
    k = np.exp(-d2 / (2.0 * bandwidth**2))
    kxx, kyy, kxy = k[:m, :m], k[m:, m:], k[:m, m:]
    if unbiased and m > 1 and n > 1:
        txx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        tyy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        if unbiased:
            log.info("MMD: set sizes (%d, %d) too small for the unbiased form; using biased", m, n)
        txx = kxx.sum() / (m * m)
        tyy = kyy.sum() / (n * n)
    txy = kxy.sum() / (m * n)
    return float(txx + tyy - 2.0 * txy), float(bandwidth)


def mmd(gen_a: Sequence, gen_b: Sequence, encoder_seed: int = 0, unbiased: bool = True) -> float:
    """Raw (possibly negative) squared-MMD estimate between two volume sets."""
    if len(gen_a) == 0 or len(gen_b) == 0:
        raise ValueError("MMD needs non-empty sets")
    enc = RandomConvEncoder(encoder_seed)
    return mmd_from_features(enc(gen_a), enc(gen_b), unbiased)[0]


@dataclass
class MetricReport:
    ms_ssim: float
    mmd: float
    mse: float
    n_samples: int
    protocol: str = "pairwise"
    mmd_raw: float = 0.0
    n_real: int = 0
    ms_ssim_pairwise: float | None = None
    ms_ssim_nearest_real: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        """One row per (metric, protocol)."""
        out = []
        if self.ms_ssim_pairwise is not None:
            out.append({"metric": "ms_ssim", "protocol": "pairwise", "value": self.ms_ssim_pairwise})
        if self.ms_ssim_nearest_real is not None:
            out.append({"metric": "ms_ssim", "protocol": "nearest_real",
                        "value": self.ms_ssim_nearest_real})
        out.append({"metric": "mmd", "protocol": "set", "value": self.mmd})
        out.append({"metric": "mse", "protocol": "nearest_real", "value": self.mse})
        return out


def evaluate(real: Sequence, generated: Sequence, protocol: str = "pairwise",
             encoder_seed: int = 0, data_range: float | None = 1.0, max_pairs: int = 100,
             seed: int = 0) -> MetricReport:
    """Compute both MS-SSIM protocols, MMD and nearest-real MSE.

    ``protocol`` selects which MS-SSIM value fills ``ms_ssim``.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if not real or not generated:
        raise ValueError("both sets must be non-empty")
    shapes = {np.shape(v) for v in list(real) + list(generated)}
    if len(shapes) != 1:
        raise ValueError(f"volumes have mixed shapes {sorted(shapes)}")
    pw = (pairwise_ms_ssim(generated, max_pairs, seed, data_range=data_range)
          if len(generated) >= 2 else None)
    nr = nearest_real_ms_ssim(generated, real, data_range=data_range)
    if protocol == "pairwise" and pw is None:
        raise ValueError("pairwise protocol needs at least 2 generated volumes")
    raw = mmd(generated, real, encoder_seed)
    if raw < 0:
        log.info("MMD estimate %.3e clamped to 0", raw)
    return MetricReport(
        ms_ssim=pw if protocol == "pairwise" else nr,
        mmd=max(raw, 0.0),
        mse=nearest_real_mse(generated, real),
        n_samples=len(generated),
        protocol=protocol,
        mmd_raw=raw,
        n_real=len(real),
        ms_ssim_pairwise=pw,
        ms_ssim_nearest_real=nr,
    )
