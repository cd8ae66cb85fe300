"""Noise schedules and the closed-form forward process.

Timesteps are 1-indexed at the interface (``t in 1..T``); array slot ``t - 1``
holds the values for timestep ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray  # DDPM reverse-step std, sqrt(beta_t)

    @property
    def T(self) -> int:
        return self.beta.size

    def alpha_bar_at(self, t) -> np.ndarray:
        """``alpha_bar`` at 1-indexed ``t``; ``t = 0`` maps to 1 (clean data)."""
        t = np.asarray(t)
        self._check(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def noise_std(self, t) -> np.ndarray:
        """Marginal std of the added noise at ``t``: ``sqrt(1 - alpha_bar_t)``."""
        return np.sqrt(1.0 - self.alpha_bar_at(t))

    def _check(self, t: np.ndarray, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise IndexError(f"timestep outside [{lo}, {self.T}]")


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 2:
        raise ConfigError("need at least two betas")
    if np.any(beta <= 0) or np.any(beta >= 1) or np.any(np.diff(beta) <= 0):
        raise ConfigError("betas must be strictly increasing inside (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), np.sqrt(beta))


def linear_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    if T < 2 or not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"invalid schedule T={T}, beta=[{beta_start}, {beta_end}]")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`` row by row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    t = np.broadcast_to(np.asarray(t), z0.shape[:1])
    schedule._check(t)
    ab = schedule.alpha_bar[t - 1][:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
