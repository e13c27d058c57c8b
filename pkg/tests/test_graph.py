"""Reverse-mode core: initialization, forward semantics, exact gradients.

The gradient oracle is central finite differences on the scalar loss
sum(output * c) for a fixed random sensitivity c.
"""

import numpy as np
import pytest

from sddr.errors import ConfigError
from sddr.graph import (
    Dense,
    Dropout,
    NetworkSpec,
    ParamStore,
    backward,
    forward,
    glorot_uniform,
    init_network_params,
    penultimate_features,
)


def make_net(layers, input_width, seed=0, name="net"):
    spec = NetworkSpec(name, ("x",), tuple(layers))
    store = ParamStore()
    init_network_params(spec, input_width, store, "p", np.random.default_rng(seed))
    return spec, store


def numeric_grad(fn, store, name, eps=1e-6):
    w = store.values[name]
    g = np.zeros_like(w)
    it = np.nditer(w, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = w[idx]
        w[idx] = orig + eps
        up = fn()
        w[idx] = orig - eps
        down = fn()
        w[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def check_gradients(spec, store, x, oz_basis=None, training=False, drop_seed=11):
    rng_factory = lambda: np.random.default_rng(drop_seed)
    out, _ = forward(spec, store, "p", x, training=training, rng=rng_factory(),
                     oz_basis=oz_basis)
    c = np.random.default_rng(99).normal(size=out.shape)

    def loss():
        o, _ = forward(spec, store, "p", x, training=training, rng=rng_factory(),
                       oz_basis=oz_basis)
        return float(np.sum(o * c))

    store.zero_grads()
    _, tape = forward(spec, store, "p", x, training=training, rng=rng_factory(),
                      oz_basis=oz_basis)
    backward(tape, c, store)
    for name in store.values:
        num = numeric_grad(loss, store, name)
        ana = store.grads[name]
        denom = max(np.max(np.abs(num)), 1e-8)
        assert np.max(np.abs(num - ana)) / denom <= 1e-4, name


# -- initialization ------------------------------------------------------------


def test_glorot_bounds_and_determinism():
    w1 = glorot_uniform(np.random.default_rng(5), 30, 20)
    w2 = glorot_uniform(np.random.default_rng(5), 30, 20)
    limit = np.sqrt(6.0 / 50.0)
    assert w1.shape == (30, 20)
    assert np.max(np.abs(w1)) <= limit
    assert np.array_equal(w1, w2)


def test_init_registers_weights_and_zero_biases():
    spec, store = make_net([Dense(4, "relu"), Dropout(0.5), Dense(2)], input_width=3)
    assert set(store.values) == {"p/L0/W", "p/L0/b", "p/L2/W", "p/L2/b"}
    assert store.values["p/L0/W"].shape == (3, 4)
    assert store.values["p/L2/W"].shape == (4, 2)
    assert np.all(store.values["p/L0/b"] == 0.0)


def test_no_bias_layer_has_no_bias_parameter():
    _, store = make_net([Dense(4, "relu", use_bias=False), Dense(1)], input_width=2)
    assert "p/L0/b" not in store.values


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ConfigError):
        store.add("w", np.zeros(2))


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec("n", ("x",), (Dense(3), Dropout(0.2))).validate()  # ends in dropout
    with pytest.raises(ConfigError):
        NetworkSpec("n", ("x",), (Dense(3, "softmax"), Dense(1))).validate()
    with pytest.raises(ConfigError):
        NetworkSpec("n", ("x",), (Dropout(1.0), Dense(1))).validate()
    with pytest.raises(ConfigError):
        NetworkSpec("n", (), (Dense(1),)).validate()


# -- forward semantics ----------------------------------------------------------


def test_linear_network_is_affine():
    spec, store = make_net([Dense(3, "linear")], input_width=2)
    x = np.random.default_rng(1).normal(size=(7, 2))
    out, _ = forward(spec, store, "p", x)
    assert np.allclose(out, x @ store.values["p/L0/W"] + store.values["p/L0/b"])


def test_activations():
    spec, store = make_net([Dense(2, "relu"), Dense(2, "tanh")], input_width=2, seed=3)
    x = np.random.default_rng(2).normal(size=(5, 2))
    w0, b0 = store.values["p/L0/W"], store.values["p/L0/b"]
    w1, b1 = store.values["p/L1/W"], store.values["p/L1/b"]
    h = np.maximum(x @ w0 + b0, 0.0)
    want = np.tanh(h @ w1 + b1)
    out, _ = forward(spec, store, "p", x)
    assert np.allclose(out, want)


def test_dropout_identity_in_inference():
    spec, store = make_net([Dense(6, "relu"), Dropout(0.5), Dense(1)], input_width=2)
    x = np.random.default_rng(3).normal(size=(11, 2))
    a, _ = forward(spec, store, "p", x, training=False)
    b, _ = forward(spec, store, "p", x, training=False, rng=123)
    assert np.array_equal(a, b)


def test_dropout_inverted_scaling_unbiased():
    # E[mask * h] = h; average over many seeds within 3 standard errors
    spec = NetworkSpec("n", ("x",), (Dropout(0.2), Dense(1, "linear", use_bias=False)))
    store = ParamStore()
    store.add("p/L1/W", np.ones((1, 1)))
    x = np.ones((1, 1))
    n_rep = 10_000
    draws = np.empty(n_rep)
    for s in range(n_rep):
        out, _ = forward(spec, store, "p", x, training=True, rng=s)
        draws[s] = out[0, 0]
    rate = 0.2
    se = np.sqrt(rate / (1 - rate) / n_rep)  # var of mask/(1-rate) at h=1
    assert abs(draws.mean() - 1.0) <= 3 * se


def test_dropout_training_draws_differ_by_seed():
    spec, store = make_net([Dense(8, "relu"), Dropout(0.5), Dense(1)], input_width=2)
    x = np.random.default_rng(4).normal(size=(9, 2))
    a, _ = forward(spec, store, "p", x, training=True, rng=1)
    b, _ = forward(spec, store, "p", x, training=True, rng=2)
    a2, _ = forward(spec, store, "p", x, training=True, rng=1)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, a2)


def test_projection_makes_output_orthogonal_to_constraints():
    spec = NetworkSpec("n", ("x",), (Dense(5, "tanh"), Dense(1, "linear", use_bias=False)))
    store = ParamStore()
    init_network_params(spec, 2, store, "p", np.random.default_rng(7))
    rng = np.random.default_rng(8)
    x = rng.normal(size=(40, 2))
    q, _ = np.linalg.qr(rng.normal(size=(40, 3)))
    out, _ = forward(spec, store, "p", x, oz_basis=q)
    assert np.max(np.abs(q.T @ out)) <= 1e-10


def test_input_must_be_two_dimensional():
    spec, store = make_net([Dense(1)], input_width=2)
    with pytest.raises(ConfigError):
        forward(spec, store, "p", np.zeros(5))


# -- gradients -------------------------------------------------------------------


def test_gradients_dense_relu_tanh_linear():
    spec, store = make_net(
        [Dense(6, "relu"), Dense(5, "tanh"), Dense(2, "linear")], input_width=3, seed=21
    )
    x = np.random.default_rng(22).normal(size=(12, 3))
    check_gradients(spec, store, x)


def test_gradients_without_bias():
    spec, store = make_net([Dense(4, "relu", use_bias=False), Dense(1, use_bias=False)],
                           input_width=2, seed=23)
    x = np.random.default_rng(24).normal(size=(10, 2))
    check_gradients(spec, store, x)


def test_gradients_through_dropout_with_replayed_mask():
    spec, store = make_net([Dense(6, "tanh"), Dropout(0.3), Dense(2)], input_width=2,
                           seed=25)
    x = np.random.default_rng(26).normal(size=(14, 2))
    check_gradients(spec, store, x, training=True, drop_seed=400)


def test_gradients_through_projection():
    spec, store = make_net([Dense(5, "tanh"), Dense(1)], input_width=2, seed=27)
    rng = np.random.default_rng(28)
    x = rng.normal(size=(20, 2))
    q, _ = np.linalg.qr(rng.normal(size=(20, 2)))
    check_gradients(spec, store, x, oz_basis=q)


def test_input_gradient_matches_finite_differences():
    spec, store = make_net([Dense(4, "tanh"), Dense(2)], input_width=3, seed=29)
    rng = np.random.default_rng(30)
    x = rng.normal(size=(6, 3))
    c = rng.normal(size=(6, 2))
    _, tape = forward(spec, store, "p", x)
    gin = backward(tape, c, store)
    eps = 1e-6
    num = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            up, _ = forward(spec, store, "p", xp)
            dn, _ = forward(spec, store, "p", xm)
            num[i, j] = np.sum((up - dn) * c) / (2 * eps)
    assert np.max(np.abs(gin - num)) <= 1e-6


def test_tape_single_use():
    spec, store = make_net([Dense(1)], input_width=2)
    x = np.zeros((3, 2))
    _, tape = forward(spec, store, "p", x)
    backward(tape, np.ones((3, 1)), store)
    with pytest.raises(ConfigError):
        backward(tape, np.ones((3, 1)), store)


def test_snapshot_restore_roundtrip():
    spec, store = make_net([Dense(3), Dense(1)], input_width=2)
    snap = store.snapshot()
    store.values["p/L0/W"] += 1.0
    store.restore(snap)
    assert np.array_equal(store.values["p/L0/W"], snap["p/L0/W"])
    # restored values must be copies, not aliases
    store.values["p/L0/W"][0, 0] = 77.0
    assert snap["p/L0/W"][0, 0] != 77.0


# -- penultimate features ----------------------------------------------------------


def test_penultimate_features_are_final_layer_input():
    spec, store = make_net([Dense(5, "relu"), Dropout(0.4), Dense(3, "tanh"), Dense(1)],
                           input_width=2, seed=31)
    x = np.random.default_rng(32).normal(size=(15, 2))
    feats = penultimate_features(spec, store, "p", x)
    assert feats.shape == (15, 3)
    out, _ = forward(spec, store, "p", x)
    w, b = store.values["p/L3/W"], store.values["p/L3/b"]
    assert np.allclose(feats @ w + b, out)
