from __future__ import annotations

import json

import numpy as np
import pytest
from conftest import quick_model
from hypothesis import given, settings
from hypothesis import strategies as st

from payload_predictor.certificate import (BoundCertificate, UnstableModelWarning,
                                           build_certificate, estimate_alphas,
                                           power_norm_partial_sums, rollout_errors,
                                           verify_global_bound, write_report_csv)
from payload_predictor.embedding import MlpParams
from payload_predictor.labeling import LabeledSet, label_log
from payload_predictor.lls import LiftedModel, NormStats
from payload_predictor.sim import PlantParams

# the untrained stand-in model sits marginally outside the unit circle
pytestmark = pytest.mark.filterwarnings("ignore::payload_predictor.certificate.UnstableModelWarning")


def identity_net():
    I = np.eye(6)
    return MlpParams([np.vstack([I, -I]), np.hstack([I, -I])], [np.zeros(12)], gamma=1.0)


def exact_system(seed=0, n=300):
    """Identity embedding, identity decoder and data generated by (A, B) exactly."""
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.normal(size=(6, 6)))[0]
    A, B = 0.9 * Q, 0.2 * rng.normal(size=(6, 6))
    zeta = np.column_stack([np.sin(0.05 * (i + 1) * np.arange(n)) for i in range(6)])
    chi = np.zeros((n, 6))
    chi[0] = rng.normal(size=6)
    for k in range(n - 1):
        chi[k + 1] = A @ chi[k] + B @ zeta[k]
    model = LiftedModel(params=identity_net(), C=np.eye(6), A=A, B=B, norm=NormStats())
    return model, LabeledSet(np.arange(n) * 0.02, chi, zeta)


@pytest.fixture(scope="module")
def circle_labels(circle_log):
    return label_log(circle_log, PlantParams(), derivatives="central")


@pytest.fixture(scope="module")
def circle_model(circle_labels):
    return quick_model(circle_labels.chi, circle_labels.zeta, gamma=1.0)


def test_constant_signals_have_zero_alphas():
    s = LabeledSet(np.arange(5.0), np.ones((5, 6)), np.full((5, 6), 2.0))
    assert estimate_alphas(s) == (0.0, 0.0)


def test_half_step_per_tick():
    chi = np.zeros((10, 6))
    chi[:, 2] = 0.5 * np.arange(10)
    assert estimate_alphas(LabeledSet(np.arange(10.0), chi, np.zeros((10, 6))))[0] == 0.5


def test_alphas_match_exhaustive_scan(circle_labels, circle_model):
    norm = circle_model.norm
    chi, zeta = norm.chi(circle_labels.chi), norm.zeta(circle_labels.zeta)
    a_chi = a_zeta = 0.0
    for k in range(len(chi) - 1):
        a_chi = max(a_chi, float(np.sqrt(np.sum((chi[k + 1] - chi[k]) ** 2))))
        a_zeta = max(a_zeta, float(np.sqrt(np.sum((zeta[k + 1] - zeta[k]) ** 2))))
    assert estimate_alphas(circle_labels, norm) == pytest.approx((a_chi, a_zeta), rel=1e-12)


def test_alphas_ignore_jumps_between_flights():
    a = LabeledSet(np.arange(3.0), np.zeros((3, 6)), np.zeros((3, 6)))
    b = LabeledSet(np.arange(3.0), np.full((3, 6), 9.0), np.zeros((3, 6)))
    assert estimate_alphas([a, b]) == (0.0, 0.0)


def test_alphas_need_two_samples():
    with pytest.raises(ValueError):
        estimate_alphas(LabeledSet(np.zeros(1), np.zeros((1, 6)), np.zeros((1, 6))))


def test_geometric_partial_sums_converge_to_two():
    s = power_norm_partial_sums(0.5 * np.eye(5), 60)
    assert s[0] == 1.0 and s[1] == 1.5
    assert abs(s[-1] - 2.0) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1.2))
def test_bound_is_nondecreasing_in_n(seed, radius):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    A *= radius / np.max(np.abs(np.linalg.eigvals(A)))
    cert = BoundCertificate(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.3, radius, radius <= 1,
                            power_norm_partial_sums(A, 30).tolist())
    b = [cert.bound(n) for n in range(31)]
    assert b[0] == 0.0 and all(y >= x for x, y in zip(b, b[1:]))


def test_perfect_autoencoder_gives_formula_without_residual():
    model, data = exact_system()
    cert = build_certificate(model, data, n_max=10)
    a_chi, a_zeta = estimate_alphas(data)
    CA, CB = np.linalg.norm(model.A, 2), np.linalg.norm(model.B, 2)
    assert cert.recon_sup == 0.0
    assert cert.L_Phi == pytest.approx(2.0, rel=1e-12)  # sqrt(2) * sqrt(2)
    assert cert.c == (CA * cert.L_Phi + 1.0) * a_chi + CB * a_zeta


def test_realizable_system_bound_is_loose():
    model, data = exact_system(1)
    cert = build_certificate(model, data, n_max=40)
    rows = verify_global_bound(model, cert, data)
    assert [r.n for r in rows] == [1, 5, 10, 20, 40]
    assert all(r.violations == 0 and r.max_ratio <= 0.1 for r in rows)


def test_n_zero_is_trivially_bounded():
    model, data = exact_system(2, 50)
    cert = build_certificate(model, data, n_max=5)
    (row,) = verify_global_bound(model, cert, data, n_list=(0,))
    assert row.bound == 0.0 and row.max_error == 0.0 and row.violations == 0


def test_independent_recomputation_of_c(circle_model, circle_labels, tmp_path):
    path = tmp_path / "model.json"
    circle_model.save(str(path))
    d = json.loads(path.read_text())
    dims, K = d["layer_dims"], d["K"]
    W = [np.array(w).reshape(dims[l + 1], dims[l]) for l, w in enumerate(d["weights"])]
    bias = [np.array(b) for b in d["biases"]]
    C = np.array(d["C"]).reshape(6, K)
    A, B = np.array(d["A"]).reshape(K, K), np.array(d["B"]).reshape(K, 6)
    ns = d["norm_stats"]
    X = (circle_labels.chi - np.array(ns["chi_mean"])) / np.array(ns["chi_scale"])
    U = (circle_labels.zeta - np.array(ns["zeta_mean"])) / np.array(ns["zeta_scale"])
    H = X
    for Wl, bl in zip(W[:-1], bias):
        H = np.maximum(H @ Wl.T + bl, 0.0)
    Z = H @ W[-1].T
    L = np.prod([np.linalg.svd(Wl, compute_uv=False)[0] for Wl in W])
    a_chi = np.max(np.linalg.norm(X[1:] - X[:-1], axis=1))
    a_zeta = np.max(np.linalg.norm(U[1:] - U[:-1], axis=1))
    recon = np.max(np.linalg.norm(X - Z @ C.T, axis=1))
    sv = lambda M: np.linalg.svd(M, compute_uv=False)[0]
    c = (sv(C @ A) * L + 1) * a_chi + sv(C @ B) * a_zeta + recon
    cert = build_certificate(LiftedModel.load(str(path)), circle_labels)
    assert abs(cert.c - c) <= 1e-9 * c


def test_certificate_is_deterministic(circle_model, circle_labels, tmp_path):
    path = tmp_path / "model.json"
    circle_model.save(str(path))
    a = build_certificate(LiftedModel.load(str(path)), circle_labels).to_json()
    b = build_certificate(LiftedModel.load(str(path)), circle_labels).to_json()
    assert a == b
    keys = set(json.loads(a))
    assert keys == {"alpha_chi", "alpha_zeta", "L_Phi", "C_norm", "CA_norm", "CB_norm",
                    "recon_sup", "c", "spectral_radius", "stable", "partial_sums"}


def test_one_step_training_error_below_c(circle_model, circle_labels):
    cert = build_certificate(circle_model, circle_labels)
    norm = circle_model.norm
    chi, zeta = norm.chi(circle_labels.chi), norm.zeta(circle_labels.zeta)
    Z = circle_model.encode(circle_labels.chi)
    pred = (Z[:-1] @ circle_model.A.T + zeta[:-1] @ circle_model.B.T) @ circle_model.C.T
    assert np.max(np.linalg.norm(chi[1:] - pred, axis=1)) <= cert.c
    assert np.max(rollout_errors(circle_model, chi, zeta, 1)) <= cert.bound(1)


def test_unstable_dynamics_flagged():
    model, data = exact_system(3, 60)
    model.A = 1.1 * np.eye(6)
    with pytest.warns(UnstableModelWarning):
        cert = build_certificate(model, data, n_max=5)
    assert not cert.stable and np.isfinite(cert.c)


def test_bound_beyond_certified_range_rejected():
    model, data = exact_system(4, 60)
    cert = build_certificate(model, data, n_max=5)
    with pytest.raises(ValueError):
        cert.bound(6)


def test_report_csv(tmp_path):
    model, data = exact_system(5, 80)
    rows = verify_global_bound(model, build_certificate(model, data), data)
    path = tmp_path / "report.csv"
    write_report_csv(str(path), rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,starts,violations,max_ratio"
    assert lines[1].startswith("1,79,0,")


def test_certificate_json_roundtrip(tmp_path):
    model, data = exact_system(6, 60)
    cert = build_certificate(model, data, n_max=8)
    path = tmp_path / "cert.json"
    cert.save(str(path))
    assert BoundCertificate.from_dict(json.loads(path.read_text())) == cert
