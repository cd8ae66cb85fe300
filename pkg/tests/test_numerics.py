import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfglab.errors import ConfigError, NumericError, ShapeError
from cfglab.numerics import (
    AdamState,
    MlpParams,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sinusoidal_embed,
)
from cfglab.rng import RandomStream

from conftest import rel_err


def random_mlp(rng, sizes, activation="silu"):
    ws = [rng.normal(size=(o, i)) / np.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(size=o) * 0.1 for o in sizes[1:]]
    return MlpParams(ws, bs, activation)


def fd_check(params, x, upstream, h=1e-5):
    """Central differences of sum(upstream * f(x)) w.r.t. every parameter and input entry."""

    def f(p, xx):
        return float(np.sum(upstream * mlp_forward(p, xx)[0]))

    arrays = params.arrays()
    fd = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in arrays]
            minus = [b.copy() for b in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(MlpParams.from_arrays(plus, params.activation), x)
                      - f(MlpParams.from_arrays(minus, params.activation), x)) / (2 * h)
        fd.append(g)
    gx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        gx[idx] = (f(params, xp) - f(params, xm)) / (2 * h)
    return fd, gx


def test_zero_weights_output_bias():
    p = MlpParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.array([0.5, -2.0])])
    out, _ = mlp_forward(p, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(out, np.tile([0.5, -2.0], (5, 1)))


def test_single_layer_matches_dot_products():
    rng = np.random.default_rng(1)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x = rng.normal(size=(6, 4))
    out, _ = mlp_forward(MlpParams([w], [b]), x)
    for n in range(6):
        for o in range(3):
            assert out[n, o] == pytest.approx(math.fsum(x[n, i] * w[o, i] for i in range(4)) + b[o], abs=1e-13)


def test_forward_deterministic():
    rng = np.random.default_rng(2)
    p = random_mlp(rng, [3, 8, 8, 2])
    x = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(mlp_forward(p, x)[0], mlp_forward(p, x)[0])


def test_forward_shape_error():
    p = random_mlp(np.random.default_rng(0), [3, 4, 2])
    with pytest.raises(ShapeError):
        mlp_forward(p, np.zeros((2, 5)))


def test_inconsistent_layers_rejected():
    with pytest.raises(ShapeError):
        MlpParams([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_zero_upstream_zero_gradients():
    rng = np.random.default_rng(3)
    p = random_mlp(rng, [3, 5, 2])
    x = rng.normal(size=(4, 3))
    _, cache = mlp_forward(p, x)
    grads, gx = mlp_backward(p, cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads.arrays())
    assert np.all(gx == 0)


def test_linear_layer_weight_grad_is_sum_of_outer_products():
    rng = np.random.default_rng(4)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    x, u = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    p = MlpParams([w], [b])
    _, cache = mlp_forward(p, x)
    grads, gx = mlp_backward(p, cache, u)
    expect = sum(np.outer(u[n], x[n]) for n in range(5))
    np.testing.assert_allclose(grads.weights[0], expect, rtol=0, atol=1e-13)
    np.testing.assert_allclose(grads.biases[0], u.sum(axis=0), rtol=0, atol=1e-13)
    np.testing.assert_allclose(gx, u @ w, rtol=0, atol=1e-13)


def test_backward_shape_error():
    rng = np.random.default_rng(0)
    p = random_mlp(rng, [3, 4, 2])
    _, cache = mlp_forward(p, rng.normal(size=(2, 3)))
    with pytest.raises(ShapeError):
        mlp_backward(p, cache, np.zeros((2, 3)))


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_two_hidden_layers_finite_differences(activation):
    rng = np.random.default_rng(5)
    p = random_mlp(rng, [3, 6, 5, 2], activation)
    x, u = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    _, cache = mlp_forward(p, x)
    grads, gx = mlp_backward(p, cache, u)
    fd, fdx = fd_check(p, x, u)
    for g, f in zip(grads.arrays(), fd):
        assert rel_err(g, f).max() <= 1e-5
    assert rel_err(gx, fdx).max() <= 1e-5


def test_finite_differences_many_random_configs():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(1, 6)) for _ in range(depth)] + [int(rng.integers(1, 4))]
        p = random_mlp(rng, sizes)
        batch = int(rng.integers(1, 4))
        x, u = rng.normal(size=(batch, sizes[0])), rng.normal(size=(batch, sizes[-1]))
        _, cache = mlp_forward(p, x)
        grads, gx = mlp_backward(p, cache, u)
        fd, fdx = fd_check(p, x, u)
        worst = max([worst, rel_err(gx, fdx).max()] + [rel_err(g, f).max() for g, f in zip(grads.arrays(), fd)])
    assert worst <= 1e-5


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(7)
    p = random_mlp(rng, [4, 16, 16, 2])
    x, u = rng.normal(size=(64, 4)), rng.normal(size=(64, 2))
    perm = rng.permutation(64)
    out, cache = mlp_forward(p, x)
    out_p, cache_p = mlp_forward(p, x[perm])
    np.testing.assert_array_equal(out[perm], out_p)
    g, _ = mlp_backward(p, cache, u)
    gp, _ = mlp_backward(p, cache_p, u[perm])
    for a, b in zip(g.arrays(), gp.arrays()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_init_mlp_he_scaling():
    p = init_mlp([200, 100], RandomStream(11))
    assert abs(p.weights[0].var() / (2 / 200) - 1) < 0.05
    assert np.all(p.biases[0] == 0)


def test_init_mlp_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        init_mlp([3, 0, 2], RandomStream(0))


# -- Adam -------------------------------------------------------------------------


def test_adam_zero_grad_fixed_point():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = AdamState.zeros_like(params)
    new, st1 = adam_step(params, [np.zeros(2), np.zeros((1, 1))], state)
    for a, b in zip(params, new):
        np.testing.assert_array_equal(a, b)
    assert st1.step == 1


@pytest.mark.parametrize("g", [0.3, -4.0, 1e-3])
def test_adam_first_step_is_lr_times_sign(g):
    lr, eps = 1e-2, 1e-8
    state = AdamState.zeros_like([np.zeros(1)], lr=lr, eps=eps)
    new, _ = adam_step([np.zeros(1)], [np.array([g])], state)
    # m_hat = g, v_hat = g^2  ->  update = -lr * g / (|g| + eps)
    assert abs(new[0][0] + lr * np.sign(g)) <= lr * eps / abs(g) + 1e-18


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    params = [rng.normal(size=(3, 2))]
    grads = [rng.normal(size=(3, 2))]
    state = AdamState.zeros_like(params)
    a, sa = adam_step(params, grads, state)
    b, sb = adam_step(params, grads, state)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(sa.v[0], sb.v[0])
    assert np.all(sa.v[0] >= 0)


def test_adam_rejects_non_finite():
    state = AdamState.zeros_like([np.zeros(2)])
    with pytest.raises(NumericError):
        adam_step([np.zeros(2)], [np.array([1.0, np.nan])], state)


def test_adam_rejects_bad_hyper():
    state = AdamState.zeros_like([np.zeros(2)], beta1=1.0)
    with pytest.raises(ConfigError):
        adam_step([np.zeros(2)], [np.zeros(2)], state)


# -- embeddings -----------------------------------------------------------------------


def test_embed_zero_phase():
    e = sinusoidal_embed(0, 16, 100)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100), st.sampled_from([2, 4, 8, 16, 32]))
def test_embed_range(t, dim):
    e = sinusoidal_embed(t, dim, 100)
    assert e.shape == (dim,)
    assert np.all(np.abs(e) <= 1.0)


def test_embed_scalar_oracle():
    e = sinusoidal_embed(7, 8, 100)
    expect = []
    for i in range(4):
        f = 10000.0 ** (-i / 3)
        expect += [math.sin(7 * f), math.cos(7 * f)]
    np.testing.assert_allclose(e, expect, rtol=0, atol=1e-15)


def test_embed_batch_matches_scalar():
    ts = np.array([1, 50, 100])
    batch = sinusoidal_embed(ts, 16, 100)
    for row, t in zip(batch, ts):
        np.testing.assert_array_equal(row, sinusoidal_embed(int(t), 16, 100))


def test_embed_odd_dim():
    with pytest.raises(ConfigError):
        sinusoidal_embed(3, 7, 100)


def test_embed_out_of_range():
    with pytest.raises(ConfigError):
        sinusoidal_embed(101, 8, 100)
