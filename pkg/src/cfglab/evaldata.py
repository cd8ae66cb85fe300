"""Analytic 2D Gaussian mixtures, the guided-sampling oracle, and two-sample metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import ConfigError, OracleDegeneracyError
from .rng import RandomStream

OVERSAMPLE = 50
_PAIR_CHUNK = 1000


@dataclass(frozen=True)
class MixtureSpec:
    means: np.ndarray  # [K, 2]
    covs: np.ndarray  # [K, 2, 2]
    weights: np.ndarray  # [K]
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        K = means.shape[0]
        if means.shape != (K, 2) or covs.shape != (K, 2, 2) or weights.shape != (K,) or K < 1:
            raise ConfigError("mixture needs means [K,2], covs [K,2,2], weights [K]")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        if not np.allclose(covs, covs.transpose(0, 2, 1), rtol=0, atol=1e-14):
            raise ConfigError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(covs) <= 0):
            raise ConfigError("covariances must be positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "chol", np.linalg.cholesky(covs))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist(), "weights": self.weights.tolist()}


def ring_mixture(K: int = 3, radius: float = 2.0, std: float = 0.35, start_deg: float = 90.0) -> MixtureSpec:
    """``K`` equal-weight isotropic Gaussians evenly spaced on a circle."""
    if K < 1 or radius < 0 or std <= 0:
        raise ConfigError("invalid ring mixture parameters")
    angles = np.deg2rad(start_deg + 360.0 * np.arange(K) / K)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.broadcast_to(std**2 * np.eye(2), (K, 2, 2)).copy()
    return MixtureSpec(means, covs, np.full(K, 1.0 / K))


def default_mixture() -> MixtureSpec:
    return ring_mixture(3, 2.0, 0.35, 90.0)


@dataclass
class SampleSet:
    points: np.ndarray
    labels: np.ndarray | None = None
    provenance: str = ""

    def __len__(self) -> int:
        return self.points.shape[0]


def _points(x) -> np.ndarray:
    return np.asarray(x.points if isinstance(x, SampleSet) else x, dtype=np.float64)


def sample_mixture(spec: MixtureSpec, n: int, stream: RandomStream) -> SampleSet:
    if n < 1:
        raise ConfigError("n must be >= 1")
    u = stream.uniform(n)
    cum = np.cumsum(spec.weights)
    labels = np.minimum(np.searchsorted(cum, u, side="left"), spec.K - 1)
    xi = stream.normal((n, 2))
    points = spec.means[labels] + np.einsum("nij,nj->ni", spec.chol[labels], xi)
    return SampleSet(points, labels)


def sample_class(spec: MixtureSpec, c: int, n: int, stream: RandomStream) -> SampleSet:
    """Direct draws from a single component."""
    xi = stream.normal((n, 2))
    return SampleSet(spec.means[c] + xi @ spec.chol[c].T, np.full(n, c))


def log_joint(spec: MixtureSpec, z) -> np.ndarray:
    """``log w_k + log N(z; mu_k, Sigma_k)`` as ``[n, K]``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    out = np.empty((z.shape[0], spec.K))
    for k in range(spec.K):
        L = spec.chol[k]
        diff = z - spec.means[k]
        # solve L y = diff^T for the 2x2 lower-triangular factor
        y0 = diff[:, 0] / L[0, 0]
        y1 = (diff[:, 1] - L[1, 0] * y0) / L[1, 1]
        log_det = 2.0 * (np.log(L[0, 0]) + np.log(L[1, 1]))
        out[:, k] = np.log(spec.weights[k]) - 0.5 * (y0**2 + y1**2) - 0.5 * log_det - np.log(2.0 * np.pi)
    return out


def log_class_posterior(spec: MixtureSpec, z) -> np.ndarray:
    lj = log_joint(spec, z)
    return lj - logsumexp(lj, axis=1, keepdims=True)


def class_posterior(spec: MixtureSpec, z) -> np.ndarray:
    """``p(c | z)`` for a single point ``[2]`` (returns ``[K]``) or a batch ``[n, 2]``."""
    post = np.exp(log_class_posterior(spec, z))
    return post[0] if np.ndim(z) == 1 else post


def tilted_target_sample(spec: MixtureSpec, c: int, w: float, n: int, stream: RandomStream,
                         oversample: int = OVERSAMPLE) -> SampleSet:
    """Draws from ``p(z) p(c | z)**w`` by importance resampling of mixture draws."""
    if w < 0 or n < 1 or not 0 <= c < spec.K:
        raise ConfigError(f"invalid oracle request c={c}, w={w}, n={n}")
    proposals = sample_mixture(spec, oversample * n, stream).points
    logw = w * log_class_posterior(spec, proposals)[:, c]
    p = np.exp(logw - logsumexp(logw))
    ess = 1.0 / np.sum(p**2)
    if ess < n:
        raise OracleDegeneracyError(f"effective sample size {ess:.1f} < {n}; raise the oversampling factor")
    cum = np.cumsum(p)
    idx = np.minimum(np.searchsorted(cum, stream.uniform(n) * cum[-1], side="left"), p.size - 1)
    return SampleSet(proposals[idx], np.full(n, c))


def mean_pairwise_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Euclidean distance over all ``(a_i, b_j)`` pairs, fixed summation order."""
    total = 0.0
    for i in range(0, a.shape[0], _PAIR_CHUNK):
        total += float(cdist(a[i:i + _PAIR_CHUNK], b).sum())
    return total / (a.shape[0] * b.shape[0])


def _order_key(x: np.ndarray):
    return (x.shape[0], x.tobytes())


def energy_distance(A, B, self_terms: tuple[float | None, float | None] = (None, None)) -> float:
    """V-statistic ``2 E|a - b| - E|a - a'| - E|b - b'|``.

    ``self_terms`` may carry precomputed within-set means to skip recomputation.
    """
    a, b = _points(A), _points(B)
    if a.size == 0 or b.size == 0:
        raise ConfigError("energy distance needs non-empty sets")
    saa, sbb = self_terms
    # canonical operand order makes the result exactly symmetric
    if _order_key(a) > _order_key(b):
        a, b, saa, sbb = b, a, sbb, saa
    saa = mean_pairwise_distance(a, a) if saa is None else saa
    sbb = mean_pairwise_distance(b, b) if sbb is None else sbb
    return 2.0 * mean_pairwise_distance(a, b) - saa - sbb


def sliced_wasserstein(A, B, n_proj: int, stream: RandomStream) -> float:
    """Mean 1-D Wasserstein-1 distance over ``n_proj`` random directions."""
    a, b = _points(A), _points(B)
    if n_proj < 1 or a.size == 0 or b.size == 0:
        raise ConfigError("sliced Wasserstein needs n_proj >= 1 and non-empty sets")
    if a.shape[0] != b.shape[0]:
        if a.shape[0] > b.shape[0]:
            a = a[np.argsort(stream.uniform(a.shape[0]), kind="stable")[: b.shape[0]]]
        else:
            b = b[np.argsort(stream.uniform(b.shape[0]), kind="stable")[: a.shape[0]]]
    if a.shape != b.shape:
        raise ConfigError("sets differ in size after subsampling")
    theta = 2.0 * np.pi * stream.uniform(n_proj)
    dirs = np.stack([np.cos(theta), np.sin(theta)])
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    return float(np.mean(np.abs(pa - pb)))


def exact_eps(spec: MixtureSpec, z, t: int, c: int | None, schedule) -> np.ndarray:
    """Optimal noise prediction for data drawn from ``spec``.

    ``c=None`` gives the unconditional (mixture) prediction.  At timestep ``t``
    each component is ``N(sqrt(abar) mu_k, abar Sigma_k + (1 - abar) I)``, so
    ``eps* = -sqrt(1 - abar) * score``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    ab = float(schedule.alpha_bar_at(t))
    scores = np.empty((spec.K, z.shape[0], 2))
    logs = np.empty((spec.K, z.shape[0]))
    for k in range(spec.K):
        cov = ab * spec.covs[k] + (1.0 - ab) * np.eye(2)
        prec = np.linalg.inv(cov)
        d = z - np.sqrt(ab) * spec.means[k]
        scores[k] = -d @ prec.T
        logs[k] = np.log(spec.weights[k]) - 0.5 * np.einsum("ni,ij,nj->n", d, prec, d) - 0.5 * np.log(np.linalg.det(cov))
    if c is None:
        post = np.exp(logs - logsumexp(logs, axis=0))
        score = np.einsum("kn,kni->ni", post, scores)
    else:
        score = scores[c]
    return -np.sqrt(1.0 - ab) * score
