from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from payload_predictor.embedding import (Decoder, MlpParams, SpectralNormalizer,
                                         apply_spectral_normalization, backprop_mlp, embed,
                                         forward_with_cache, init_mlp, layer_target,
                                         lipschitz_certificate, power_iteration, spectral_norm)


def test_zero_weights_give_zero_embedding():
    p = init_mlp(seed=1)
    p.weights = [np.zeros_like(W) for W in p.weights]
    assert np.all(embed(np.array([1.0, -2, 3, 0.5, 0, 1]), p) == 0)


def test_single_identity_layer_is_identity():
    p = MlpParams([np.eye(6)], [], gamma=1.0)
    chi = np.array([0.3, -1.0, 2.0, 0.0, 5.0, -0.1])
    assert np.array_equal(embed(chi, p), chi)


def test_forward_matches_scripted_two_hidden_layer_formula():
    p = init_mlp(seed=7)
    W1, W2, W3 = p.weights
    b1, b2 = p.biases
    chi = np.array([1.0, 0, 0, 0, 0, 0])
    h1 = [max(0.0, W1[i, 0] + b1[i]) for i in range(128)]
    h2 = [max(0.0, sum(W2[i, j] * h1[j] for j in range(128)) + b2[i]) for i in range(128)]
    z = [sum(W3[k, j] * h2[j] for j in range(128)) for k in range(24)]
    assert np.allclose(embed(chi, p), z, rtol=0, atol=1e-12)


def test_batch_and_single_forward_agree(rng):
    p = init_mlp(seed=3)
    X = rng.normal(size=(5, 6))
    Z = embed(X, p)
    for i in range(5):
        assert np.allclose(Z[i], embed(X[i], p), atol=1e-14)


def test_spectral_norm_of_diagonal():
    assert spectral_norm(np.diag([3.0, 1.0, 0.5])) == pytest.approx(3.0, abs=1e-12)


def test_spectral_norm_matches_svd(rng):
    W = rng.normal(size=(128, 128))
    s = np.linalg.svd(W, compute_uv=False)[0]
    assert abs(spectral_norm(W) - s) <= 1e-8 * s


def test_spectral_norm_of_rank_one():
    u = np.array([2.0, 0, 0])
    v = np.array([0, 3.0, 0, 0])
    assert spectral_norm(np.outer(u, v)) == pytest.approx(6.0, rel=1e-12)


def test_zero_matrix_has_zero_norm():
    sigma, u, v = power_iteration(np.zeros((4, 3)))
    assert sigma == 0.0


def test_normalization_with_gamma_one_halves_norm_two_layers():
    rng = np.random.default_rng(0)
    Ws = []
    for shape in [(5, 6), (5, 5), (4, 5)]:
        W = rng.normal(size=shape)
        Ws.append(2.0 * W / np.linalg.svd(W, compute_uv=False)[0])
    p = MlpParams(Ws, [np.zeros(5), np.zeros(5)], gamma=1.0)
    q = apply_spectral_normalization(p)
    for W, Wn in zip(Ws, q.weights):
        assert np.allclose(Wn, W / 2, atol=1e-12)
    assert lipschitz_certificate(q) == pytest.approx(1.0, abs=1e-9)


def test_normalization_is_idempotent():
    p = apply_spectral_normalization(init_mlp(seed=2))
    q = apply_spectral_normalization(p)
    for a, b in zip(p.weights, q.weights):
        assert np.max(np.abs(a - b)) < 1e-9


def test_layer_target_for_gamma_four():
    p = apply_spectral_normalization(init_mlp(gamma=4.0, seed=5))
    assert layer_target(p) == pytest.approx(4 ** (1 / 3))
    for W in p.weights:
        assert spectral_norm(W) == pytest.approx(1.5874010519681994, rel=1e-9)


def test_zero_layer_left_unchanged_with_warning():
    p = init_mlp(seed=0)
    p.weights[1] = np.zeros_like(p.weights[1])
    with pytest.warns(UserWarning, match="zero"):
        q = apply_spectral_normalization(p)
    assert np.all(q.weights[1] == 0)


def test_unnormalized_certificate_is_product_of_svd_norms():
    p = init_mlp(seed=11)
    expect = np.prod([np.linalg.svd(W, compute_uv=False)[0] for W in p.weights])
    assert lipschitz_certificate(p) == pytest.approx(expect, rel=1e-8)


def test_empirical_lipschitz_ratio_below_certificate(rng):
    p = apply_spectral_normalization(init_mlp(gamma=3.0, seed=4))
    bound = lipschitz_certificate(p)
    X, Y = rng.normal(size=(2000, 6)), rng.normal(size=(2000, 6))
    ratio = np.linalg.norm(embed(X, p) - embed(Y, p), axis=1) / np.linalg.norm(X - Y, axis=1)
    assert ratio.max() <= bound * (1 + 1e-9)


def test_bias_free_scaling_is_homogeneous(rng):
    p = init_mlp(seed=9, use_bias=False)
    c = 1.7
    scaled = MlpParams([c * W for W in p.weights], p.biases, p.gamma, use_bias=False)
    x = rng.normal(size=6)
    assert np.allclose(embed(x, scaled), c ** 3 * embed(x, p), rtol=1e-12)


def test_backprop_matches_finite_differences(rng):
    p = init_mlp((6, 7, 5, 3), seed=1)
    X = rng.normal(size=(4, 6))
    T = rng.normal(size=(4, 3))

    def loss(q):
        return float(np.sum((embed(X, q) - T) ** 2))

    Z, cache = forward_with_cache(X, p)
    dW, db = backprop_mlp(2 * (Z - T), cache, p)
    h = 1e-6
    for l, W in enumerate(p.weights):
        for idx in [(0, 0), (W.shape[0] - 1, W.shape[1] - 1), (1, 2)]:
            qp, qm = p.copy(), p.copy()
            qp.weights[l][idx] += h
            qm.weights[l][idx] -= h
            fd = (loss(qp) - loss(qm)) / (2 * h)
            assert fd == pytest.approx(dW[l][idx], rel=1e-6, abs=1e-8)
    for l, b in enumerate(p.biases):
        qp, qm = p.copy(), p.copy()
        qp.biases[l][0] += h
        qm.biases[l][0] -= h
        assert (loss(qp) - loss(qm)) / (2 * h) == pytest.approx(db[l][0], rel=1e-6, abs=1e-8)


def test_spectral_normalizer_backward_matches_finite_differences(rng):
    p = init_mlp((6, 5, 4), gamma=2.0, seed=2)
    X = rng.normal(size=(3, 6))

    def loss(q):
        sn = SpectralNormalizer(q, seed=0)
        return float(np.sum(embed(X, sn.normalize(q, n_iter=5000, tol=1e-15)) ** 2))

    sn = SpectralNormalizer(p, seed=0)
    eff = sn.normalize(p, n_iter=5000, tol=1e-15)
    Z, cache = forward_with_cache(X, eff)
    dW_hat, _ = backprop_mlp(2 * Z, cache, eff)
    grads = sn.backward(p, dW_hat)
    h = 1e-6
    for l, W in enumerate(p.weights):
        qp, qm = p.copy(), p.copy()
        qp.weights[l][1, 1] += h
        qm.weights[l][1, 1] -= h
        assert (loss(qp) - loss(qm)) / (2 * h) == pytest.approx(grads[l][1, 1], rel=1e-5,
                                                                  abs=1e-8)


def test_init_is_deterministic():
    a, b = init_mlp(seed=42), init_mlp(seed=42)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_decoder_shape_and_apply():
    C = np.arange(6 * 24, dtype=float).reshape(6, 24)
    d = Decoder(C)
    z = np.ones(24)
    assert np.allclose(d(z), C.sum(axis=1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(-50, 50)),
       arrays(np.float64, (6,), elements=st.floats(-50, 50)))
def test_normalized_embedding_respects_gamma(x, y):
    p = _normalized_net()
    d = np.linalg.norm(x - y)
    assert np.linalg.norm(embed(x, p) - embed(y, p)) <= p.gamma * d * (1 + 1e-9) + 1e-12


_NET = {}


def _normalized_net():
    if "p" not in _NET:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _NET["p"] = apply_spectral_normalization(init_mlp(gamma=2.0, seed=8))
    return _NET["p"]
