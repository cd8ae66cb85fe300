"""Conditional noise predictor with a null token, and a noise-aware classifier.

One network serves both branches: the class condition enters as a learned
embedding row, and the unconditional branch uses an extra row (index ``K``)
reserved for the null token.  Condition arrays use ``NULL = -1`` for that token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .errors import ConfigError, ShapeError
from .numerics import MlpCache, MlpParams, init_mlp, mlp_backward, mlp_forward, sinusoidal_embed

NULL = -1
CHECKPOINT_FORMAT = "cfglab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    K: int = 3
    hidden: tuple[int, ...] = (128, 128)
    time_embed_dim: int = 16
    class_embed_dim: int = 8
    activation: str = "silu"

    def validate(self):
        if self.K < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"invalid model config {self}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.class_embed_dim < 1:
            raise ConfigError("class_embed_dim must be >= 1")


@dataclass
class PassCounter:
    """Counts network rows pushed through forward and backward passes."""

    forward: int = 0
    backward: int = 0


@dataclass
class Denoiser:
    mlp: MlpParams
    class_embed: np.ndarray  # [K + 1, E]; row K is the null token
    time_embed_dim: int
    K: int

    def __post_init__(self):
        if self.class_embed.shape[0] != self.K + 1:
            raise ShapeError("class_embed needs K + 1 rows")
        if self.mlp.in_dim != 2 + self.time_embed_dim + self.class_embed.shape[1]:
            raise ShapeError("mlp input dim must be 2 + time_embed_dim + class_embed_dim")
        if self.mlp.out_dim != 2:
            raise ShapeError("denoiser must output 2 values")

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays() + [self.class_embed]

    def with_arrays(self, arrays: list[np.ndarray]) -> "Denoiser":
        return Denoiser(MlpParams.from_arrays(arrays[:-1], self.mlp.activation), arrays[-1], self.time_embed_dim, self.K)


@dataclass
class NoiseClassifier:
    mlp: MlpParams
    time_embed_dim: int
    K: int

    def __post_init__(self):
        if self.mlp.out_dim != self.K:
            raise ShapeError("classifier must output K logits")
        if self.mlp.in_dim != 2 + self.time_embed_dim:
            raise ShapeError("classifier input dim must be 2 + time_embed_dim")

    def arrays(self) -> list[np.ndarray]:
        return self.mlp.arrays()

    def with_arrays(self, arrays: list[np.ndarray]) -> "NoiseClassifier":
        return NoiseClassifier(MlpParams.from_arrays(arrays, self.mlp.activation), self.time_embed_dim, self.K)


@dataclass
class DenoiserCache:
    mlp: MlpCache
    rows: np.ndarray  # class_embed row used per example


def init_denoiser(config: ModelConfig, stream) -> Denoiser:
    config.validate()
    in_dim = 2 + config.time_embed_dim + config.class_embed_dim
    mlp = init_mlp([in_dim, *config.hidden, 2], stream, config.activation)
    embed = stream.normal((config.K + 1, config.class_embed_dim))
    return Denoiser(mlp, embed, config.time_embed_dim, config.K)


def init_classifier(config: ModelConfig, stream) -> NoiseClassifier:
    config.validate()
    mlp = init_mlp([2 + config.time_embed_dim, *config.hidden, config.K], stream, config.activation)
    return NoiseClassifier(mlp, config.time_embed_dim, config.K)


def token_rows(c, K: int, n: int) -> np.ndarray:
    """Map condition tokens (class index or ``NULL``) to embedding rows."""
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if np.any((c < NULL) | (c >= K)):
        raise IndexError(f"condition token outside [0, {K}) and not NULL")
    return np.where(c == NULL, K, c)


def _time_features(z_t: np.ndarray, t, dim: int, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 2 or z_t.shape[1] != 2:
        raise ShapeError(f"z_t must be [batch, 2], got {z_t.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), z_t.shape[:1])
    return z_t, sinusoidal_embed(t, dim, schedule.T)


def denoiser_forward(d: Denoiser, z_t, t, c, schedule: NoiseSchedule, counter: PassCounter | None = None):
    z_t, temb = _time_features(z_t, t, d.time_embed_dim, schedule)
    rows = token_rows(c, d.K, z_t.shape[0])
    x = np.concatenate([z_t, temb, d.class_embed[rows]], axis=1)
    out, cache = mlp_forward(d.mlp, x)
    if counter is not None:
        counter.forward += z_t.shape[0]
    return out, DenoiserCache(cache, rows)


def denoiser_backward(d: Denoiser, cache: DenoiserCache, upstream, counter: PassCounter | None = None):
    """Gradients of ``sum(upstream * eps_hat)``: parameter list and ``d/dz_t``."""
    g_mlp, g_in = mlp_backward(d.mlp, cache.mlp, upstream)
    g_embed = np.zeros_like(d.class_embed)
    np.add.at(g_embed, cache.rows, g_in[:, 2 + d.time_embed_dim:])
    if counter is not None:
        counter.backward += g_in.shape[0]
    return g_mlp.arrays() + [g_embed], g_in[:, :2]


def predict_eps(d: Denoiser, z_t, t, c, schedule: NoiseSchedule, counter: PassCounter | None = None) -> np.ndarray:
    return denoiser_forward(d, z_t, t, c, schedule, counter)[0]


def classifier_forward(cl: NoiseClassifier, z_t, t, schedule: NoiseSchedule):
    z_t, temb = _time_features(z_t, t, cl.time_embed_dim, schedule)
    return mlp_forward(cl.mlp, np.concatenate([z_t, temb], axis=1))


def classifier_logits(cl: NoiseClassifier, z_t, t, schedule: NoiseSchedule) -> np.ndarray:
    return classifier_forward(cl, z_t, t, schedule)[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def classifier_grad_log_prob(cl: NoiseClassifier, z_t, t, c, schedule: NoiseSchedule) -> np.ndarray:
    """``grad_z log p(c | z_t)`` for each row."""
    logits, cache = classifier_forward(cl, z_t, t, schedule)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), logits.shape[:1])
    upstream = -np.exp(log_softmax(logits))
    upstream[np.arange(c.size), c] += 1.0
    _, g_in = mlp_backward(cl.mlp, cache, upstream)
    return g_in[:, :2]


def classifier_loss_and_grads(cl: NoiseClassifier, z_t, t, labels, schedule: NoiseSchedule):
    """Mean cross-entropy and its parameter gradients."""
    logits, cache = classifier_forward(cl, z_t, t, schedule)
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    upstream = np.exp(logp)
    upstream[np.arange(n), labels] -= 1.0
    g, _ = mlp_backward(cl.mlp, cache, upstream / n)
    return float(loss), g.arrays()


# -- checkpoints ---------------------------------------------------------------
#
# JSON document, fields in this order:
#   format, version, kind ("denoiser" | "classifier"), config_digest,
#   config (model block), params: [{name, shape, data}], meta (free-form)
# Parameter order: mlp.0.weight, mlp.0.bias, ..., [class_embed].
# Floats are written with repr(), which round-trips float64 exactly.


def _param_names(n_layers: int, with_embed: bool) -> list[str]:
    names = []
    for k in range(n_layers):
        names += [f"mlp.{k}.weight", f"mlp.{k}.bias"]
    return names + (["class_embed"] if with_embed else [])


def save_checkpoint(model, config: ModelConfig, path, config_digest: str = "", meta: dict | None = None):
    kind = "denoiser" if isinstance(model, Denoiser) else "classifier"
    arrays = model.arrays()
    names = _param_names(len(model.mlp.weights), kind == "denoiser")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config_digest": config_digest,
        "config": {**asdict(config), "hidden": list(config.hidden)},
        "params": [{"name": n, "shape": list(a.shape), "data": a.reshape(-1).tolist()} for n, a in zip(names, arrays)],
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(model, ModelConfig, document)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    cfg = dict(doc["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    config = ModelConfig(**cfg)
    arrays = [np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]]
    if doc["kind"] == "denoiser":
        mlp = MlpParams.from_arrays(arrays[:-1], config.activation)
        model = Denoiser(mlp, arrays[-1], config.time_embed_dim, config.K)
    else:
        model = NoiseClassifier(MlpParams.from_arrays(arrays, config.activation), config.time_embed_dim, config.K)
    return model, config, doc
