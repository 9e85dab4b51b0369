"""Matplotlib figures for run artifacts. Uses the Agg backend; nothing is shown."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_loss", "plot_rank_ablation", "plot_slices"]

_META = {"Software": "tenvoo", "Creation Time": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata=_META if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def _smooth(y, window):
    if window <= 1 or len(y) < window:
        return np.asarray(y, dtype=float)
    k = np.ones(window) / window
    return np.convolve(y, k, mode="valid")


def plot_loss(steps: Sequence[int], losses: Sequence[float], path, title: str = "training loss",
              window: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, color="0.75", lw=0.8, label="per step")
    sm = _smooth(losses, window)
    if len(sm) != len(losses):
        ax.plot(np.asarray(steps)[window - 1:], sm, color="C0", lw=1.6, label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_rank_ablation(ranks, n_params, ms_ssim, path, kind: str = "") -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
    a1.plot(ranks, n_params, "o-", color="C0")
    a1.set_xlabel("rank")
    a1.set_ylabel("trainable parameters")
    a1.set_xticks(list(ranks))
    a2.plot(ranks, ms_ssim, "s-", color="C1")
    a2.set_xlabel("rank")
    a2.set_ylabel("MS-SSIM")
    a2.set_xticks(list(ranks))
    if kind:
        fig.suptitle(kind)
    return _save(fig, path)


def plot_slices(volumes: Sequence[np.ndarray], path, titles: Sequence[str] | None = None) -> Path:
    """Central axial/coronal/sagittal slices, one row per volume."""
    n = len(volumes)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for row, vol in enumerate(volumes):
        vol = np.asarray(vol)
        d, h, w = (s // 2 for s in vol.shape)
        for col, sl in enumerate((vol[d], vol[:, h], vol[:, :, w])):
            ax = axes[row, col]
            ax.imshow(sl, cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
        if titles:
            axes[row, 0].set_ylabel(titles[row], fontsize=8)
    return _save(fig, path)
