"""Run configuration: one flat document of dotted keys.

The file is TOML written as ``block.key = value`` lines.  Every key has a typed
default, so a config file only lists what it changes.  The command line honours
one environment override, ``CFGLAB_OUT`` (output directory).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .denoiser import ModelConfig
from .diffusion import NoiseSchedule, linear_schedule
from .errors import ConfigError
from .evaldata import MixtureSpec, ring_mixture
from .guidance import Cfg, GuidanceRule, RescaledCfg
from .sampling import SamplerConfig
from .training import TrainConfig

OUT_ENV = "CFGLAB_OUT"

# Keys that do not change results and are left out of the digest.
NON_SEMANTIC = ("run.out_dir", "run.workers")

DEFAULTS: dict[str, object] = {
    "schedule.T": 100,
    "schedule.beta_start": 1e-3,
    "schedule.beta_end": 0.2,
    "model.hidden": [128, 128],
    "model.time_embed_dim": 16,
    "model.class_embed_dim": 8,
    "model.activation": "silu",
    "mixture.K": 3,
    "mixture.radius": 2.0,
    "mixture.std": 0.35,
    "mixture.start_deg": 90.0,
    "train.steps": 20000,
    "train.lr": 3e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.p_uncond": 0.1,
    "train.w_train": 1.0,
    "train.batch_standard": 256,
    "train.batch_updated": 128,
    "sampler.kind": "ddpm",
    "sampler.n_steps": 100,
    "sampler.eta": 0.0,
    "sampler.guidance": "cfg",
    "sampler.phi": 0.7,
    "eval.metric": "energy",
    "eval.n_samples": 10000,
    "eval.w_sample": [0.0, 1.0, 2.0, 4.0, 8.0],
    "eval.classes": [0, 1, 2],
    "eval.seeds": [0, 1, 2, 3, 4],
    "eval.floor_reps": 3,
    "eval.n_proj": 128,
    "eval.steps": [5, 10, 20, 50, 100],
    "eval.sweep_w": 1.8,
    "ablation.w_train": [0.5, 1.0, 2.0],
    "ablation.w_sample": [0.5, 1.0, 2.0, 4.0],
    "plot.max_points": 2000,
    "run.out_dir": "runs/default",
    "run.workers": 1,
}

METRICS = ("energy", "sliced")


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key}: expected a non-empty list")
        return [_scalar(key, v, type(default[0])) for v in value]
    return _scalar(key, value, type(default))


def _scalar(key: str, value, kind: type):
    if isinstance(value, bool):
        raise ConfigError(f"{key}: booleans are not accepted")
    if kind is float and isinstance(value, (int, float)):
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def from_flat(cls, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **changes) -> "RunConfig":
        """``replace(**{"eval.seeds": [3]})`` style update."""
        return RunConfig.from_flat({**self.values, **changes})

    # -- derived objects -------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(K=self["mixture.K"], hidden=tuple(self["model.hidden"]),
                           time_embed_dim=self["model.time_embed_dim"],
                           class_embed_dim=self["model.class_embed_dim"], activation=self["model.activation"])

    def mixture(self) -> MixtureSpec:
        return ring_mixture(self["mixture.K"], self["mixture.radius"], self["mixture.std"], self["mixture.start_deg"])

    def train_config(self, loss_mode: str, w_train: float | None = None, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            loss_mode=loss_mode,
            w_train=self["train.w_train"] if w_train is None else float(w_train),
            p_uncond=self["train.p_uncond"],
            batch_size=self[f"train.batch_{loss_mode}"],
            steps=self["train.steps"], lr=self["train.lr"], beta1=self["train.beta1"],
            beta2=self["train.beta2"], adam_eps=self["train.adam_eps"], seed=seed)

    def guidance(self, w: float) -> GuidanceRule:
        if self["sampler.guidance"] == "rescaled":
            return RescaledCfg(w, self["sampler.phi"])
        return Cfg(w)

    def sampler_config(self, w: float, condition: int, seed: int, kind: str | None = None,
                       n_steps: int | None = None) -> SamplerConfig:
        return SamplerConfig(kind=kind or self["sampler.kind"],
                             n_steps=self["sampler.n_steps"] if n_steps is None else n_steps,
                             eta=self["sampler.eta"], guidance=self.guidance(w),
                             n_samples=self["eval.n_samples"], condition=condition, seed=seed)

    @property
    def out_dir(self) -> Path:
        return Path(self["run.out_dir"])

    def validate(self):
        v = self.values
        schedule = self.schedule()
        self.model_config().validate()
        self.mixture()
        for mode in ("standard", "updated"):
            self.train_config(mode)
        if v["sampler.guidance"] not in ("cfg", "rescaled"):
            raise ConfigError("sampler.guidance must be 'cfg' or 'rescaled'")
        if not 0.0 <= v["sampler.phi"] <= 1.0:
            raise ConfigError("sampler.phi must lie in [0, 1]")
        for w in v["eval.w_sample"] + v["ablation.w_train"] + v["ablation.w_sample"] + [v["eval.sweep_w"]]:
            if w < 0:
                raise ConfigError("guidance scales must be >= 0")
        self.sampler_config(0.0, 0, 0).validate(schedule.T)
        for n in v["eval.steps"]:
            if not 1 <= n <= schedule.T:
                raise ConfigError(f"eval.steps entries must lie in [1, {schedule.T}]")
        if v["eval.metric"] not in METRICS:
            raise ConfigError(f"eval.metric must be one of {METRICS}")
        if any(not 0 <= c < v["mixture.K"] for c in v["eval.classes"]):
            raise ConfigError("eval.classes must index mixture components")
        if len(set(v["eval.seeds"])) != len(v["eval.seeds"]) or min(v["eval.seeds"]) < 0:
            raise ConfigError("eval.seeds must be distinct and non-negative")
        for key in ("eval.floor_reps", "eval.n_proj", "plot.max_points", "run.workers"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")

    # -- identity --------------------------------------------------------
    def semantic(self) -> dict:
        return {k: v for k, v in sorted(self.values.items()) if k not in NON_SEMANTIC}

    @property
    def digest(self) -> str:
        return digest_of(self.semantic())


def digest_of(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return RunConfig.from_flat(_flatten(doc))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _toml_value(value) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def dump_config(config: RunConfig) -> str:
    """Serialise as dotted-key TOML; blocks in a fixed order, keys as listed in DEFAULTS."""
    lines, block = [], None
    for key in DEFAULTS:
        head = key.split(".")[0]
        if head != block:
            if block is not None:
                lines.append("")
            block = head
        lines.append(f"{key} = {_toml_value(config[key])}")
    return "\n".join(lines) + "\n"
