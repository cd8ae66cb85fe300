"""Rules for combining noise estimates at each reverse step.

These functions only touch noise estimates; all schedule arithmetic lives in
the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

MODES = ("none", "cfg", "classifier", "rescaled")


@dataclass(frozen=True)
class GuidanceRule:
    mode: str = "none"
    w: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"guidance mode must be one of {MODES}")
        if self.w < 0:
            raise ConfigError("guidance scale w must be >= 0")
        if not 0 <= self.phi <= 1:
            raise ConfigError("phi must lie in [0, 1]")

    @property
    def needs_uncond(self) -> bool:
        return self.mode in ("cfg", "rescaled")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "w": self.w, "phi": self.phi}


def NoGuidance() -> GuidanceRule:
    return GuidanceRule("none")


def Cfg(w: float) -> GuidanceRule:
    return GuidanceRule("cfg", w)


def ClassifierGrad(w: float) -> GuidanceRule:
    return GuidanceRule("classifier", w)


def RescaledCfg(w: float, phi: float) -> GuidanceRule:
    return GuidanceRule("rescaled", w, phi)


def _same_shape(*arrays):
    if any(a.shape != arrays[0].shape for a in arrays[1:]):
        raise ShapeError(f"shape mismatch: {[a.shape for a in arrays]}")


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """``(1 + w) eps_cond - w eps_uncond``; ``w = 0`` returns ``eps_cond`` exactly."""
    eps_cond, eps_uncond = np.asarray(eps_cond, float), np.asarray(eps_uncond, float)
    _same_shape(eps_cond, eps_uncond)
    if w == 0:
        return eps_cond.copy()
    return (1.0 + w) * eps_cond - w * eps_uncond


def classifier_guidance(eps_cond, grad_logp, w: float, sigma_t) -> np.ndarray:
    """``eps_cond - w * sigma_t * grad log p(c | z_t)``."""
    eps_cond, grad_logp = np.asarray(eps_cond, float), np.asarray(grad_logp, float)
    _same_shape(eps_cond, grad_logp)
    if np.any(np.asarray(sigma_t) <= 0):
        raise ConfigError("sigma_t must be > 0")
    return eps_cond - w * np.asarray(sigma_t) * grad_logp


def row_std(x: np.ndarray) -> np.ndarray:
    """Population std across coordinates of each row, as a column."""
    return np.std(x, axis=1, keepdims=True)


def rescaled_cfg(eps_cond, eps_uncond, w: float, phi: float) -> np.ndarray:
    """Guided estimate rescaled to the conditional estimate's per-row std,
    then mixed back with the plain guided estimate by ``phi``."""
    x = cfg_combine(eps_cond, eps_uncond, w)
    if phi == 0:
        return x
    std_x = row_std(x)
    if np.any(std_x == 0):
        raise DegenerateInputError("guided estimate has zero std in some row")
    rescaled = x * (row_std(np.asarray(eps_cond, float)) / std_x)
    return phi * rescaled + (1.0 - phi) * x


def apply_rule(rule: GuidanceRule, eps_cond, eps_uncond=None, grad_logp=None, sigma_t=None) -> np.ndarray:
    if rule.mode == "none":
        return np.asarray(eps_cond, float)
    if rule.mode == "cfg":
        return cfg_combine(eps_cond, eps_uncond, rule.w)
    if rule.mode == "rescaled":
        return rescaled_cfg(eps_cond, eps_uncond, rule.w, rule.phi)
    return classifier_guidance(eps_cond, grad_logp, rule.w, sigma_t)
