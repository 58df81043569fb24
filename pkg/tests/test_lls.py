from __future__ import annotations

import time
import warnings

import numpy as np
import pytest
from conftest import quick_model
from hypothesis import given, settings
from hypothesis import strategies as st

from payload_predictor.errors import InsufficientHistory, NumericalError, SchemaError, \
    SingularDynamicsError
from payload_predictor.labeling import label_log
from payload_predictor.lls import (IllConditionedWarning, LiftedModel, NormStats,
                                   OnlinePredictor, WindowBuffer, fit_AB,
                                   predict_wrench_horizon, rollout_backward, rollout_forward,
                                   window_refit)
from payload_predictor.sim import PlantParams


def stable_system(rng, K, m=6, radius=0.9):
    A = rng.normal(size=(K, K))
    A *= radius / np.max(np.abs(np.linalg.eigvals(A)))
    return A, rng.normal(size=(K, m))


def simulate_lls(A, B, rng, T):
    K = A.shape[0]
    U = rng.normal(size=(B.shape[1], T))
    Z = np.empty((K, T))
    Z[:, 0] = rng.normal(size=K)
    for k in range(T - 1):
        Z[:, k + 1] = A @ Z[:, k] + B @ U[:, k]
    return Z, U


def test_fit_recovers_known_system(rng):
    A0, B0 = stable_system(rng, 6)
    Z, U = simulate_lls(A0, B0, rng, 200)
    A, B = fit_AB(Z[:, :-1], Z[:, 1:], U[:, :-1], ridge=0.0)
    assert np.linalg.norm(A - A0) + np.linalg.norm(B - B0) <= 1e-8


def test_identity_dynamics(rng):
    Z = rng.normal(size=(5, 30))
    with pytest.warns(IllConditionedWarning):  # the zero input rows are rank deficient
        A, B = fit_AB(Z, Z, np.zeros((6, 30)), ridge=0.0)
    assert np.allclose(A, np.eye(5), atol=1e-9) and np.allclose(B, 0, atol=1e-9)


def test_rank_one_data_is_reproduced(rng):
    z = rng.normal(size=(4, 1))
    u = rng.normal(size=(6, 1))
    Z0, U0 = np.repeat(z, 10, axis=1), np.repeat(u, 10, axis=1)
    Z1 = np.repeat(rng.normal(size=(4, 1)), 10, axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        A, B = fit_AB(Z0, Z1, U0, ridge=0.0)
    assert np.allclose(A @ Z0 + B @ U0, Z1, atol=1e-10)


def test_nonfinite_input_rejected():
    Z = np.ones((3, 5))
    Z[0, 0] = np.inf
    with pytest.raises(NumericalError):
        fit_AB(Z, Z, np.ones((6, 5)))


def test_ill_conditioning_warns_but_returns(rng):
    Z0 = np.repeat(rng.normal(size=(4, 1)), 20, axis=1)
    with pytest.warns(IllConditionedWarning):
        A, B = fit_AB(Z0, Z0, np.zeros((6, 20)), ridge=0.0)
    assert np.all(np.isfinite(A))


def test_fit_is_locally_optimal(rng):
    A0, B0 = stable_system(rng, 5)
    Z, U = simulate_lls(A0, B0, rng, 60)
    Z1 = Z[:, 1:] + 0.01 * rng.normal(size=(5, 59))
    A, B = fit_AB(Z[:, :-1], Z1, U[:, :-1])

    def resid(a, b):
        return np.linalg.norm(Z1 - a @ Z[:, :-1] - b @ U[:, :-1])

    r0 = resid(A, B)
    for _ in range(100):
        assert resid(A + 1e-3 * rng.normal(size=A.shape), B + 1e-3 * rng.normal(size=B.shape)) >= r0


def test_refitting_model_generated_data_is_idempotent(rng):
    A0, B0 = stable_system(rng, 4)
    Z, U = simulate_lls(A0 + 0.01, B0, rng, 80)
    A, B = fit_AB(Z[:, :-1], Z[:, 1:], U[:, :-1], ridge=0.0)
    Z2 = rollout_forward(A, B, Z[:, 0], U.T, 79).T
    A2, B2 = fit_AB(Z2[:, :-1], Z2[:, 1:], U[:, :-1], ridge=0.0)
    assert np.allclose(A2, A, atol=1e-8) and np.allclose(B2, B, atol=1e-8)


def test_rollout_forward_basics():
    z0 = np.ones(3)
    assert np.array_equal(rollout_forward(np.eye(3), np.zeros((3, 6)), z0, np.zeros((0, 6)), 0),
                          z0[None, :])
    seq = rollout_forward(np.eye(3), np.zeros((3, 6)), z0, np.ones((5, 6)), 5)
    assert np.all(seq == 1)
    seq = rollout_forward(0.5 * np.eye(1), np.zeros((1, 6)), np.ones(1), np.zeros((10, 6)), 10)
    assert np.allclose(seq[:, 0], 0.5 ** np.arange(11), atol=1e-12)


def test_rollout_backward_scalar():
    out = rollout_backward(2 * np.eye(1), np.zeros((1, 6)), np.array([8.0]), np.zeros((3, 6)), 3)
    assert out[0, 0] == pytest.approx(1.0)


def test_rollout_backward_needs_invertible_a():
    with pytest.raises(SingularDynamicsError, match="invertible"):
        rollout_backward(np.diag([1.0, 0.0]), np.zeros((2, 6)), np.ones(2), np.zeros((2, 6)), 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 40))
def test_forward_backward_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    K = 8
    Q, _ = np.linalg.qr(rng.normal(size=(K, K)))
    A = Q @ np.diag(rng.uniform(0.8, 1.0, K))
    B = rng.normal(size=(K, 6))
    z0 = rng.normal(size=K)
    zeta = rng.normal(size=(n, 6))
    fwd = rollout_forward(A, B, z0, zeta, n)
    back = rollout_backward(A, B, fwd[-1], zeta, n)
    assert np.allclose(back[0], z0, atol=1e-9)


def test_window_buffer_is_chronological():
    buf = WindowBuffer(4)
    for i in range(6):
        buf.push(np.full(6, i), np.full(6, -i))
    chi, zeta = buf.arrays()
    assert buf.full and buf.count == 4
    assert list(chi[:, 0]) == [2, 3, 4, 5] and list(zeta[:, 0]) == [-2, -3, -4, -5]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 30))
def test_window_buffer_count_invariant(cap, pushes):
    buf = WindowBuffer(cap)
    for i in range(pushes):
        buf.push(np.full(6, i), np.zeros(6))
    assert buf.count == min(cap, pushes)
    chi, _ = buf.arrays()
    assert np.all(np.diff(chi[:, 0]) == 1)


@pytest.fixture(scope="module")
def small_model(circle_log):
    labels = label_log(circle_log, PlantParams().nominal())
    return quick_model(labels.chi, labels.zeta), labels


def test_window_refit_needs_full_buffer(small_model):
    model, _ = small_model
    with pytest.raises(InsufficientHistory, match="insufficient history"):
        window_refit(WindowBuffer(40), model)


def test_window_refit_deterministic_and_fast(small_model):
    model, labels = small_model
    buf = WindowBuffer(40)
    for k in range(40):
        buf.push(labels.chi[k], labels.zeta[k])
    A1, B1 = window_refit(buf, model)
    A2, B2 = window_refit(buf, model)
    assert np.array_equal(A1, A2) and np.array_equal(B1, B2)
    times = []
    for _ in range(30):
        t0 = time.perf_counter()
        A, B = window_refit(buf, model)
        predict_wrench_horizon(model, labels.chi[39], labels.zeta[39:59], A, B)
        times.append(time.perf_counter() - t0)
    assert np.median(times) <= 10e-3


def test_constant_wrench_window_predicts_constant(small_model):
    model, labels = small_model
    chi = labels.chi[100]
    zeta = labels.zeta[100]
    buf = WindowBuffer(40)
    for _ in range(40):
        buf.push(chi, zeta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        A, B = window_refit(buf, model)
    pred = predict_wrench_horizon(model, chi, np.tile(zeta, (40, 1)), A, B)
    first = pred[0]
    assert np.max(np.linalg.norm(pred - first, axis=1)) <= 0.02 * np.linalg.norm(first)


def test_one_step_prediction_is_direct_substitution(small_model):
    model, labels = small_model
    chi, zeta = labels.chi[10], labels.zeta[10]
    pred = predict_wrench_horizon(model, chi, zeta[None, :])
    z = model.encode(chi)
    expect = model.norm.chi_inv(model.C @ (model.A @ z + model.B @ model.norm.zeta(zeta)))
    assert np.array_equal(pred[0], expect)


def test_zero_dynamics_predict_zero(small_model):
    model, labels = small_model
    K = model.K
    zero = LiftedModel(params=model.params, C=model.C, A=np.zeros((K, K)),
                       B=np.zeros((K, 6)), norm=NormStats())
    zero.C = np.zeros_like(model.C)
    pred = predict_wrench_horizon(zero, labels.chi[0], labels.zeta[:5])
    assert np.all(pred == 0)


def test_online_predictor_cold_start_and_clip(small_model):
    model, labels = small_model
    pred = OnlinePredictor(model)
    assert np.all(pred.predict(labels.zeta[:19]) == 0)
    for k in range(45):
        pred.update(labels.chi[k], labels.zeta[k])
    out = pred.predict(labels.zeta[45:64])
    lo, hi = model.norm.envelope(pred.envelope_margin)
    assert out.shape == (20, 6)
    assert np.all(out >= lo) and np.all(out <= hi)
    assert pred.refit_ms > 0


def test_model_json_roundtrip(small_model):
    model, _ = small_model
    text = model.to_json()
    back = LiftedModel.from_json(text)
    assert back.to_json() == text
    assert np.array_equal(back.A, model.A) and np.array_equal(back.C, model.C)
    for a, b in zip(back.params.weights, model.params.weights):
        assert np.array_equal(a, b)


def test_model_json_rejects_bad_version(small_model):
    model, _ = small_model
    d = model.to_dict()
    d["version"] = 99
    with pytest.raises(SchemaError):
        LiftedModel.from_dict(d)


def test_grouped_normalization_shares_scale(rng):
    chi = rng.normal(size=(100, 6)) * [1, 2, 3, 0.01, 0.02, 0.03]
    norm = NormStats.fit(chi, rng.normal(size=(100, 6)))
    assert len(set(norm.chi_scale[:3])) == 1 and len(set(norm.chi_scale[3:])) == 1
    assert np.allclose(norm.chi_inv(norm.chi(chi)), chi, atol=1e-12)
    assert np.array_equal(norm.chi_lo, chi.min(axis=0))
