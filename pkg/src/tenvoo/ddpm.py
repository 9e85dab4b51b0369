"""Gaussian diffusion: schedule, forward corruption, ancestral sampling, training step.

Time steps are 1-based (``t = 1..T``) throughout this module; the noise
model receives the 0-based index ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "DiffusionSchedule",
    "make_schedule",
    "q_sample",
    "p_step",
    "diffusion_loss",
    "train_step",
    "sample",
    "TrainingError",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float
    shape: str = "linear"

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"time step {t} outside [1, {self.T}]")

    def at(self, t: int) -> tuple[float, float, float, float]:
        """``(beta_t, alpha_t, alpha_bar_t, sigma_t)`` for 1-based ``t``."""
        self._check(t)
        j = t - 1
        return self.beta[j], self.alpha[j], self.alpha_bar[j], self.sigma[j]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "shape": self.shape}


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  shape: str = "linear") -> DiffusionSchedule:
    if shape != "linear":
        raise ValueError(f"unsupported schedule shape {shape!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for j in range(T):
        acc = acc * alpha[j]
        alpha_bar[j] = acc
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return DiffusionSchedule(T, beta, alpha, alpha_bar, sigma, float(beta_start), float(beta_end), shape)


def q_sample(x0, t: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    _, _, abar, _ = schedule.at(t)
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def p_step(x_t, t: int, eps_pred, schedule: DiffusionSchedule, z=None) -> np.ndarray:
    """One reverse step ``x_{t-1} = mu(x_t, eps_pred) + sigma_t z``; ``z`` is ignored at ``t = 1``."""
    beta, alpha, abar, sigma = schedule.at(t)
    mu = (np.asarray(x_t) - beta / np.sqrt(1.0 - abar) * np.asarray(eps_pred)) / np.sqrt(alpha)
    if t == 1 or z is None:
        return mu
    return mu + sigma * np.asarray(z)


def diffusion_loss(model: Callable, x0, t: int, eps, schedule: DiffusionSchedule) -> Node:
    x_t = q_sample(x0, t, eps, schedule)
    return ad.mse_loss(model(x_t, t - 1), eps)


def train_step(model: Callable, batch: Sequence[np.ndarray], schedule: DiffusionSchedule,
               rng: np.random.Generator, optimizer=None, params=None,
               max_grad_norm: float | None = None) -> dict:
    """Accumulate gradients over the micro-batches in ``batch`` and update once.

    Each micro-batch draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` from
    ``rng``. Returns the mean loss and the global gradient norm.
    """
    if len(batch) == 0:
        raise TrainingError("empty batch")
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for x0 in batch:
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(np.shape(x0))
        loss = diffusion_loss(model, x0, t, eps, schedule)
        val = float(loss.value)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite loss {val} at t={t}")
        total += val
        for k, g in ad.backward(loss).items():
            grads[k] = grads[k] + g if k in grads else g
    n = len(batch)
    grads = {k: g / n for k, g in grads.items()}
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_grad_norm is not None and norm > max_grad_norm:
        grads = {k: g * (max_grad_norm / norm) for k, g in grads.items()}
    if optimizer is not None and grads:
        optimizer.step(params, grads)
    return {"loss": total / n, "grad_norm": norm}


def sample(model: Callable, schedule: DiffusionSchedule, shape, seed: int) -> np.ndarray:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    with ad.no_grad():
        for t in range(schedule.T, 0, -1):
            eps = model(x, t - 1)
            eps = eps.value if isinstance(eps, Node) else np.asarray(eps)
            z = rng.standard_normal(shape) if t > 1 else None
            x = p_step(x, t, eps, schedule, z)
    return x
