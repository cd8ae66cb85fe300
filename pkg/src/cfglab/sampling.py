"""Reverse-process samplers (DDPM ancestral, DDIM) with pluggable guidance."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .denoiser import NULL, Denoiser, NoiseClassifier, classifier_grad_log_prob, predict_eps
from .diffusion import NoiseSchedule
from .errors import ConfigError
from .guidance import GuidanceRule, NoGuidance, apply_rule
from .rng import RowStreams

# Rows are evaluated in chunks of this size whatever the worker count: BLAS
# kernels for very small batches round differently from large ones.
CHUNK_ROWS = 2048


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    n_steps: int = 100
    eta: float = 0.0
    guidance: GuidanceRule = field(default_factory=NoGuidance)
    n_samples: int = 10000
    condition: int = 0
    seed: int = 0

    def validate(self, T: int):
        if self.kind not in ("ddpm", "ddim"):
            raise ConfigError(f"unknown sampler {self.kind!r}")
        if not 1 <= self.n_steps <= T:
            raise ConfigError(f"n_steps must lie in [1, {T}]")
        if self.kind == "ddpm" and self.n_steps != T:
            raise ConfigError("DDPM sampling requires n_steps = T")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.guidance.mode != "none" and self.condition == NULL:
            raise ConfigError("guided sampling needs a class condition")


def timestep_subsequence(T: int, n_steps: int) -> list[int]:
    """``n_steps`` timesteps from ``T`` down to 1, evenly spaced (floored)."""
    if not 1 <= n_steps <= T:
        raise ConfigError(f"n_steps must lie in [1, {T}]")
    if n_steps == 1:
        return [T]
    seq = [T - (i * (T - 1)) // (n_steps - 1) for i in range(n_steps)]
    return list(dict.fromkeys(seq))


def ddim_step(z_t, eps_tilde, t: int, t_prev: int, schedule: NoiseSchedule, eta: float = 0.0, stream=None):
    """Move from ``t`` to ``t_prev`` (``t_prev = 0`` returns the clean estimate)."""
    if not 0 <= t_prev <= t:
        raise ConfigError(f"need 0 <= t_prev <= t, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_at(t_prev))
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_tilde) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    if sigma**2 > 1.0 - ab_prev + 1e-15:
        raise ConfigError(f"eta={eta} gives sigma^2 > 1 - alpha_bar_prev")
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_tilde
    if sigma > 0:
        out = out + sigma * stream.normal(np.shape(z_t))
    return out


def ddpm_step(z_t, eps_tilde, t: int, schedule: NoiseSchedule, stream=None):
    """Ancestral step ``t -> t - 1`` with ``sigma_t = sqrt(beta_t)``; no noise at ``t = 1``."""
    if not 1 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")
    beta, alpha, ab = schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps_tilde) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + schedule.sigma[t - 1] * stream.normal(np.shape(z_t))


def guided_eps(denoiser: Denoiser, classifier: NoiseClassifier | None, rule: GuidanceRule, z, t: int, condition: int,
               schedule: NoiseSchedule) -> np.ndarray:
    cond = predict_eps(denoiser, z, t, condition, schedule)
    if rule.needs_uncond:
        uncond = predict_eps(denoiser, z, t, NULL, schedule)
        return apply_rule(rule, cond, eps_uncond=uncond)
    if rule.mode == "classifier":
        grad = classifier_grad_log_prob(classifier, z, t, condition, schedule)
        return apply_rule(rule, cond, grad_logp=grad, sigma_t=schedule.sigma[t - 1])
    return apply_rule(rule, cond)


def _generate_rows(denoiser, classifier, config: SamplerConfig, schedule: NoiseSchedule, rows: np.ndarray, trace):
    streams = RowStreams(config.seed, rows)
    z = streams.normal((rows.size, 2))
    if config.kind == "ddpm":
        for t in range(schedule.T, 0, -1):
            eps = guided_eps(denoiser, classifier, config.guidance, z, t, config.condition, schedule)
            z = ddpm_step(z, eps, t, schedule, streams)
            if trace is not None:
                trace.append((t, t - 1))
        return z
    seq = timestep_subsequence(schedule.T, config.n_steps)
    for t, t_prev in zip(seq, seq[1:] + [0]):
        eps = guided_eps(denoiser, classifier, config.guidance, z, t, config.condition, schedule)
        z = ddim_step(z, eps, t, t_prev, schedule, config.eta, streams)
        if trace is not None:
            trace.append((t, t_prev))
    return z


def generate(denoiser: Denoiser, classifier: NoiseClassifier | None, config: SamplerConfig, schedule: NoiseSchedule,
             rows=None, workers: int = 1, trace: list | None = None) -> np.ndarray:
    """Draw ``[n_samples, 2]`` samples.

    Row ``r`` gets its own stream derived from ``(config.seed, r)``; pass
    ``rows`` to request specific row ids.  ``trace`` (if given) receives the
    ``(t, t_prev)`` pairs visited by the first chunk.
    """
    config.validate(schedule.T)
    if config.guidance.mode == "classifier" and classifier is None:
        raise ConfigError("classifier guidance needs a trained classifier")
    rows = np.arange(config.n_samples) if rows is None else np.asarray(rows, dtype=np.int64)
    chunks = [rows[i:i + CHUNK_ROWS] for i in range(0, rows.size, CHUNK_ROWS)]
    traces = [trace] + [None] * (len(chunks) - 1)

    def run(job):
        chunk, tr = job
        return _generate_rows(denoiser, classifier, config, schedule, chunk, tr)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, zip(chunks, traces)))
    else:
        parts = [run(job) for job in zip(chunks, traces)]
    return np.concatenate(parts, axis=0)
