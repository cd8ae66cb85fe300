"""Dense-network numerics: MLP forward/backward, Adam, timestep embeddings.

Matrices are plain float64 ``numpy`` arrays, row-major ``[batch, features]``.
Weights follow the ``[out, in]`` convention so a layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


# Each activation is (forward, derivative).  forward returns (value, aux);
# derivative takes (pre-activation, aux) so backward can reuse forward work.


def silu(x: np.ndarray):
    with np.errstate(over="ignore"):  # exp overflow gives s = 0, which is exact
        s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def silu_grad(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1.0 + x * (1.0 - s))


def tanh(x: np.ndarray):
    y = np.tanh(x)
    return y, y


def tanh_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def identity(x: np.ndarray):
    return x, None


def identity_grad(x: np.ndarray, aux) -> np.ndarray:
    return np.ones_like(x)


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "tanh": (tanh, tanh_grad),
    "identity": (identity, identity_grad),
}


@dataclass
class MlpParams:
    """Weights ``[out, in]`` and biases ``[out]`` per layer.

    ``activation`` is applied between layers, never after the last one.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[1]} != previous output {self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameters as a flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], activation: str = "silu") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each layer (post-activation of the previous one)
    pre: list[np.ndarray]  # pre-activation of each layer
    aux: list  # activation-specific values saved by the forward pass


def init_mlp(sizes: list[int], stream, activation: str = "silu") -> MlpParams:
    """He-style init: ``W ~ N(0, 2 / fan_in)``, zero biases."""
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(stream.normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    act = ACTIVATIONS[params.activation][0]
    inputs, pre, aux = [], [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        if k == last:
            h = a
        else:
            h, extra = act(a)
            aux.append(extra)
    return h, MlpCache(inputs, pre, aux)


def mlp_backward(params: MlpParams, cache: MlpCache, upstream: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

    Parameter gradients are returned as an :class:`MlpParams` of the same shape.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if len(cache.pre) != len(params.weights) or upstream.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match cached output")
    d_act = ACTIVATIONS[params.activation][1]
    n = len(params.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    g = upstream
    for k in range(n - 1, -1, -1):
        if k != n - 1:
            g = g * d_act(cache.pre[k], cache.aux[k])
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    return MlpParams(gw, gb, params.activation), g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: list[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, **hyper)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    if not (state.lr > 0 and 0 <= state.beta1 < 1 and 0 <= state.beta2 < 1 and state.eps > 0):
        raise ConfigError("invalid Adam hyperparameters")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and moments must have equal length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry")
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def embedding_frequencies(dim: int) -> np.ndarray:
    """Geometric angular frequencies from 1 down to 1e-4."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return 10000.0 ** (-np.arange(half) / (half - 1))


def sinusoidal_embed(t, dim: int, T: int) -> np.ndarray:
    """Interleaved ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]``.

    ``t`` may be a scalar (returns ``[dim]``) or an array (returns ``[n, dim]``).
    """
    freqs = embedding_frequencies(dim)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ConfigError(f"timestep outside [0, {T}]")
    phase = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out
