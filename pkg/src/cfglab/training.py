"""Training objectives for guided denoisers and the optimisation loop.

``standard``: plain noise-prediction MSE with the class token randomly replaced
by the null token.  ``updated``: MSE between the true noise and the guided
combination ``(1 + w) eps(z, c) - w eps(z, null)``, so both branches are
evaluated (and back-propagated) on the same ``(z_t, eps)`` every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .denoiser import (
    NULL,
    Denoiser,
    NoiseClassifier,
    PassCounter,
    classifier_loss_and_grads,
    denoiser_backward,
    denoiser_forward,
)
from .diffusion import NoiseSchedule, q_sample
from .errors import ConfigError, NumericError, ShapeError
from .numerics import AdamState, adam_step
from .rng import RandomStream

LOSS_MODES = ("standard", "updated")
DEFAULT_BATCH = {"standard": 256, "updated": 128}


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "standard"
    w_train: float = 1.0
    p_uncond: float = 0.1
    batch_size: int | None = None  # None -> DEFAULT_BATCH[loss_mode]
    steps: int = 20000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.w_train < 0:
            raise ConfigError("w_train must be >= 0")
        if not 0 <= self.p_uncond <= 1:
            raise ConfigError("p_uncond must lie in [0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("need lr > 0, 0 <= beta1, beta2 < 1 and adam_eps > 0")

    @property
    def batch(self) -> int:
        return self.batch_size or DEFAULT_BATCH[self.loss_mode]

    def adam_state(self, arrays) -> AdamState:
        return AdamState.zeros_like(arrays, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


def dropout_condition(c: int, p_uncond: float, stream: RandomStream) -> int:
    """Replace a class token by ``NULL`` with probability ``p_uncond``."""
    return int(dropout_conditions(np.array([c]), p_uncond, stream)[0])


def dropout_conditions(labels: np.ndarray, p_uncond: float, stream: RandomStream) -> np.ndarray:
    u = stream.uniform(len(labels))  # (0, 1], so p = 0 never drops and p = 1 always does
    return np.where(u <= p_uncond, NULL, labels)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def loss_standard(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean over all elements of ``(eps - eps_hat)**2``."""
    eps, eps_hat = np.asarray(eps, float), np.asarray(eps_hat, float)
    _check_pair(eps, eps_hat)
    return float(np.mean((eps - eps_hat) ** 2))


def guided_residual(eps, eps_cond_hat, eps_uncond_hat, w: float) -> np.ndarray:
    return eps - (1.0 + w) * eps_cond_hat + w * eps_uncond_hat


def loss_updated(eps, eps_cond_hat, eps_uncond_hat, w: float) -> float:
    eps, eps_cond_hat, eps_uncond_hat = (np.asarray(a, float) for a in (eps, eps_cond_hat, eps_uncond_hat))
    _check_pair(eps, eps_cond_hat)
    _check_pair(eps, eps_uncond_hat)
    if w < 0:
        raise ConfigError("w must be >= 0")
    return float(np.mean(guided_residual(eps, eps_cond_hat, eps_uncond_hat, w) ** 2))


def standard_objective(model: Denoiser, z0, tokens, t, eps, schedule: NoiseSchedule, counter: PassCounter | None = None):
    """Standard loss and parameter gradients for fixed ``(t, eps, tokens)``."""
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat, cache = denoiser_forward(model, z_t, t, tokens, schedule, counter)
    loss = loss_standard(eps, eps_hat)
    upstream = 2.0 * (eps_hat - eps) / eps.size
    grads, _ = denoiser_backward(model, cache, upstream, counter)
    return loss, grads


def updated_objective(model: Denoiser, z0, labels, t, eps, w: float, schedule: NoiseSchedule, counter: PassCounter | None = None):
    """Updated loss and gradients through both the class and null branches."""
    z_t = q_sample(z0, t, eps, schedule)
    cond, cache_c = denoiser_forward(model, z_t, t, labels, schedule, counter)
    uncond, cache_u = denoiser_forward(model, z_t, t, NULL, schedule, counter)
    r = guided_residual(eps, cond, uncond, w)
    loss = float(np.mean(r**2))
    g_r = 2.0 * r / r.size
    grads_c, _ = denoiser_backward(model, cache_c, -(1.0 + w) * g_r, counter)
    grads_u, _ = denoiser_backward(model, cache_u, w * g_r, counter)
    return loss, [a + b for a, b in zip(grads_c, grads_u)]


def draw_training_noise(n: int, schedule: NoiseSchedule, stream: RandomStream):
    """Per-example timestep and noise, drawn in a fixed order (t, then eps)."""
    t = stream.integers(1, schedule.T + 1, n)
    eps = stream.normal((n, 2))
    return t, eps


def loss_and_grads(model: Denoiser, z0, labels, config: TrainConfig, schedule: NoiseSchedule, stream: RandomStream,
                   counter: PassCounter | None = None):
    z0 = np.asarray(z0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z0.shape[0] == 0:
        raise ConfigError("empty batch")
    t, eps = draw_training_noise(z0.shape[0], schedule, stream)
    if config.loss_mode == "standard":
        tokens = dropout_conditions(labels, config.p_uncond, stream)
        return standard_objective(model, z0, tokens, t, eps, schedule, counter)
    return updated_objective(model, z0, labels, t, eps, config.w_train, schedule, counter)


def train_step(model: Denoiser, batch, config: TrainConfig, schedule: NoiseSchedule, adam_state: AdamState,
               stream: RandomStream, counter: PassCounter | None = None):
    """One Adam update. ``batch`` is ``(z0 [B, 2], labels [B])``."""
    z0, labels = batch
    loss, grads = loss_and_grads(model, z0, labels, config, schedule, stream, counter)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    arrays, adam_state = adam_step(model.arrays(), grads, adam_state)
    return model.with_arrays(arrays), adam_state, loss


BatchSampler = Callable[[RandomStream, int], tuple[np.ndarray, np.ndarray]]


def train(model: Denoiser, sample_batch: BatchSampler, config: TrainConfig, schedule: NoiseSchedule,
          counter: PassCounter | None = None, log_every: int = 0, log=print):
    """Run ``config.steps`` updates on fresh batches. Returns ``(model, losses)``.

    Data and noise come from separate substreams of ``config.seed`` so that the
    two objectives see identical data for identical seeds.
    """
    data_stream = RandomStream(config.seed, substream=1)
    noise_stream = RandomStream(config.seed, substream=2)
    state = config.adam_state(model.arrays())
    losses = np.empty(config.steps)
    for step in range(config.steps):
        batch = sample_batch(data_stream, config.batch)
        model, state, losses[step] = train_step(model, batch, config, schedule, state, noise_stream, counter)
        if log_every and (step + 1) % log_every == 0:
            log(f"[{config.loss_mode}] step {step + 1}/{config.steps} loss {losses[step - log_every + 1:step + 1].mean():.5f}")
    return model, losses


def train_classifier(cl: NoiseClassifier, sample_batch: BatchSampler, schedule: NoiseSchedule, steps: int,
                     batch_size: int = 256, lr: float = 1e-3, seed: int = 0):
    """Cross-entropy on noised data at uniformly random timesteps."""
    data_stream = RandomStream(seed, substream=1)
    noise_stream = RandomStream(seed, substream=2)
    state = AdamState.zeros_like(cl.arrays(), lr=lr)
    losses = np.empty(steps)
    for step in range(steps):
        z0, labels = sample_batch(data_stream, batch_size)
        t, eps = draw_training_noise(batch_size, schedule, noise_stream)
        z_t = q_sample(z0, t, eps, schedule)
        losses[step], grads = classifier_loss_and_grads(cl, z_t, t, labels, schedule)
        if not np.isfinite(losses[step]):
            raise NumericError("non-finite classifier loss")
        arrays, state = adam_step(cl.arrays(), grads, state)
        cl = cl.with_arrays(arrays)
    return cl, losses
