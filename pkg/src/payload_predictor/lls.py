"""Lifted linear system: least-squares (A, B), forward/backward rollouts,
sliding-window refit and horizon prediction of the wrench."""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .embedding import MlpParams, embed
from .errors import InsufficientHistory, NumericalError, SchemaError, SingularDynamicsError

MODEL_VERSION = 1
ZETA_DIM = 6


class IllConditionedWarning(UserWarning):
    pass


def fit_AB(Z0, Z1, U0, ridge=1e-8, return_info=False):
    """Least-squares fit of Z1 ~ A Z0 + B U0 (samples are columns).

    With ``ridge > 0`` the regularized normal equations are solved; with
    ``ridge == 0`` the minimum-norm least-squares solution is returned.
    """
    Z0 = np.asarray(Z0, dtype=float)
    Z1 = np.asarray(Z1, dtype=float)
    U0 = np.asarray(U0, dtype=float)
    if not (np.all(np.isfinite(Z0)) and np.all(np.isfinite(Z1)) and np.all(np.isfinite(U0))):
        raise NumericalError("non-finite data in fit_AB")
    K = Z0.shape[0]
    Psi = np.vstack([Z0, U0])
    G = Psi @ Psi.T
    if ridge > 0:
        G_reg = G + ridge * np.eye(G.shape[0])
        try:
            cf = linalg.cho_factor(G_reg, check_finite=False)
            AB = linalg.cho_solve(cf, Psi @ Z1.T, check_finite=False).T
        except linalg.LinAlgError:
            AB = np.linalg.lstsq(Psi.T, Z1.T, rcond=None)[0].T
        cond = np.linalg.cond(G_reg)
    else:
        AB, _, rank, sv = np.linalg.lstsq(Psi.T, Z1.T, rcond=None)
        AB = AB.T
        cond = (sv[0] / sv[-1]) ** 2 if sv[-1] > 0 else np.inf
    ill = bool(cond > 1e12)
    if ill:
        warnings.warn(f"ill-conditioned regressor (cond={cond:.3g})", IllConditionedWarning)
    A, B = AB[:, :K], AB[:, K:]
    if return_info:
        return A, B, {"cond": float(cond), "ill_conditioned": ill}
    return A, B


def rollout_forward(A, B, z0, zeta_seq, n):
    """z_{k+1} = A z_k + B zeta_k for k < n; returns (n+1, K)."""
    zeta_seq = np.asarray(zeta_seq, dtype=float)
    if n > len(zeta_seq):
        raise ValueError("zeta sequence shorter than n")
    out = np.empty((n + 1, len(z0)))
    out[0] = z0
    for k in range(n):
        out[k + 1] = A @ out[k] + B @ zeta_seq[k]
    return out


def backward_factor(A, max_cond=1e10):
    if np.linalg.cond(A) > max_cond:
        raise SingularDynamicsError("backward rollout requires invertible A")
    return linalg.lu_factor(A, check_finite=False)


def rollout_backward(A, B, z_end, zeta_seq, n, lu=None):
    """z_k = A^{-1}(z_{k+1} - B zeta_k) from z_n = z_end; returns (n+1, K)."""
    zeta_seq = np.asarray(zeta_seq, dtype=float)
    if n > len(zeta_seq):
        raise ValueError("zeta sequence shorter than n")
    lu = lu if lu is not None else backward_factor(A)
    out = np.empty((n + 1, len(z_end)))
    out[n] = z_end
    for k in range(n - 1, -1, -1):
        out[k] = linalg.lu_solve(lu, out[k + 1] - B @ zeta_seq[k], check_finite=False)
    return out


@dataclass
class NormStats:
    """Affine standardization; forces, torques, linear and angular rates
    each share one scale across their three axes."""

    chi_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    chi_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    zeta_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    zeta_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    chi_lo: np.ndarray = field(default_factory=lambda: np.full(6, -np.inf))
    chi_hi: np.ndarray = field(default_factory=lambda: np.full(6, np.inf))

    _KEYS = ("chi_mean", "chi_scale", "zeta_mean", "zeta_scale", "chi_lo", "chi_hi")

    @classmethod
    def fit(cls, chi, zeta):
        chi = np.asarray(chi, dtype=float)
        return cls(*_grouped_stats(chi), *_grouped_stats(zeta), chi.min(axis=0), chi.max(axis=0))

    def to_dict(self):
        return {k: [None if not np.isfinite(v) else float(v) for v in getattr(self, k)]
                for k in self._KEYS}

    @classmethod
    def from_dict(cls, d):
        vals = []
        for k, fill in zip(cls._KEYS, (0.0, 1.0, 0.0, 1.0, -np.inf, np.inf)):
            raw = d.get(k, [fill] * 6)
            vals.append(np.array([fill if v is None else v for v in raw], dtype=float))
        return cls(*vals)

    def envelope(self, margin=5.0):
        """Training label range widened by ``margin`` group scales."""
        return self.chi_lo - margin * self.chi_scale, self.chi_hi + margin * self.chi_scale

    def chi(self, chi):
        return (np.asarray(chi) - self.chi_mean) / self.chi_scale

    def chi_inv(self, chi_n):
        return np.asarray(chi_n) * self.chi_scale + self.chi_mean

    def zeta(self, zeta):
        return (np.asarray(zeta) - self.zeta_mean) / self.zeta_scale


def _grouped_stats(X):
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = np.empty(6)
    for g in (slice(0, 3), slice(3, 6)):
        s = np.sqrt(np.mean((X[:, g] - mean[g]) ** 2))
        scale[g] = s if s > 1e-9 else 1.0
    return mean, scale


@dataclass
class LiftedModel:
    """Trained embedding, decoder and training-time (A, B) in normalized space."""

    params: MlpParams
    C: np.ndarray
    A: np.ndarray
    B: np.ndarray
    t_s: float = 0.02
    window_T: int = 40
    norm: NormStats = field(default_factory=NormStats)
    ridge: float = 1e-8
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.params.K

    def encode(self, chi):
        return embed(self.norm.chi(chi), self.params)

    def decode(self, z):
        return self.norm.chi_inv(np.asarray(z) @ self.C.T)

    def spectral_radius(self, A=None):
        A = self.A if A is None else A
        return float(np.max(np.abs(np.linalg.eigvals(A))))

    @property
    def stable(self):
        return self.spectral_radius() <= 1.0 + 1e-6

    def validate(self):
        K = self.K
        if self.C.shape != (6, K) or self.A.shape != (K, K) or self.B.shape != (K, ZETA_DIM):
            raise SchemaError("inconsistent model dimensions")
        if not self.t_s > 0:
            raise SchemaError("t_s must be positive")

    # ------------------------------------------------------------ JSON io

    def to_dict(self):
        p = self.params
        return {
            "version": MODEL_VERSION,
            "K": int(self.K),
            "zeta_dim": ZETA_DIM,
            "gamma": float(p.gamma),
            "use_bias": bool(p.use_bias),
            "layer_dims": [int(d) for d in p.layer_dims],
            "weights": [W.ravel().tolist() for W in p.weights],
            "biases": [b.tolist() for b in p.biases],
            "C": self.C.ravel().tolist(),
            "A": self.A.ravel().tolist(),
            "B": self.B.ravel().tolist(),
            "t_s": float(self.t_s),
            "window_T": int(self.window_T),
            "ridge": float(self.ridge),
            "norm_stats": self.norm.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != MODEL_VERSION:
            raise SchemaError(f"unsupported model version {d.get('version')!r}")
        if d.get("zeta_dim") != ZETA_DIM:
            raise SchemaError("zeta_dim must be 6")
        dims = d["layer_dims"]
        weights = [np.asarray(w, dtype=float).reshape(dims[l + 1], dims[l])
                   for l, w in enumerate(d["weights"])]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        K = d["K"]
        params = MlpParams(weights, biases, float(d["gamma"]), bool(d.get("use_bias", True)))
        model = cls(
            params=params,
            C=np.asarray(d["C"], dtype=float).reshape(6, K),
            A=np.asarray(d["A"], dtype=float).reshape(K, K),
            B=np.asarray(d["B"], dtype=float).reshape(K, ZETA_DIM),
            t_s=float(d["t_s"]), window_T=int(d["window_T"]),
            norm=NormStats.from_dict(d["norm_stats"]), ridge=float(d.get("ridge", 1e-8)),
        )
        params.validate()
        model.validate()
        return model

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


class WindowBuffer:
    """Fixed-capacity chronological buffer of (chi, zeta) pairs."""

    def __init__(self, capacity=40):
        self.capacity = capacity
        self._chi = np.zeros((capacity, 6))
        self._zeta = np.zeros((capacity, 6))
        self._head = 0
        self.count = 0

    def push(self, chi, zeta):
        self._chi[self._head] = chi
        self._zeta[self._head] = zeta
        self._head = (self._head + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    @property
    def full(self):
        return self.count == self.capacity

    def arrays(self):
        """(chi, zeta) in chronological order."""
        if self.count < self.capacity:
            return self._chi[:self.count].copy(), self._zeta[:self.count].copy()
        idx = (np.arange(self.capacity) + self._head) % self.capacity
        return self._chi[idx], self._zeta[idx]

    def clear(self):
        self._head = 0
        self.count = 0


def window_refit(buf: WindowBuffer, model: LiftedModel):
    """(A_k, B_k) from the embedded window."""
    if not buf.full:
        raise InsufficientHistory("insufficient history")
    chi, zeta = buf.arrays()
    Z = model.encode(chi)
    U = model.norm.zeta(zeta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        return fit_AB(Z[:-1].T, Z[1:].T, U[:-1].T, ridge=model.ridge)


def predict_wrench_horizon(model: LiftedModel, chi_prev, zeta_seq, A=None, B=None):
    """Iterate chi_i = C (A z_{i-1} + B zeta_{i-1}) with z_{-1} = Phi(chi_prev).

    ``zeta_seq[i]`` is the regressor entering step i (so ``zeta_seq[0]`` is
    zeta_{k-1}). Returns an (N, 6) array of raw-unit wrenches.
    """
    A = model.A if A is None else A
    B = model.B if B is None else B
    zn = model.norm.zeta(np.atleast_2d(zeta_seq))
    z = model.encode(chi_prev)
    Z = np.empty((len(zn), len(z)))
    for i in range(len(zn)):
        z = A @ z + B @ zn[i]
        Z[i] = z
    return model.decode(Z)


class OnlinePredictor:
    """Streaming wrench predictor: window buffer, per-tick refit and horizon
    prediction. Until a label exists the prediction is zero; until the
    window fills, training-time (A, B) are used."""

    def __init__(self, model: LiftedModel, refit=True, envelope_margin=5.0):
        self.model = model
        self.refit = refit
        self.envelope_margin = envelope_margin
        self.buffer = WindowBuffer(model.window_T)
        self.reset()

    def reset(self):
        self.buffer.clear()
        self.A = self.model.A
        self.B = self.model.B
        self.chi_prev = None
        self.zeta_prev = None
        self.refit_ms = 0.0

    def update(self, chi, zeta):
        self.buffer.push(chi, zeta)
        self.chi_prev = np.asarray(chi, dtype=float)
        self.zeta_prev = np.asarray(zeta, dtype=float)
        if self.refit and self.buffer.full:
            t0 = time.perf_counter()
            self.A, self.B = window_refit(self.buffer, self.model)
            self.refit_ms = (time.perf_counter() - t0) * 1e3

    def predict(self, zeta_future):
        """Horizon prediction; ``zeta_future`` are the regressors of the
        predicted states x_0 .. x_{N-2}; zeta_{k-1} is prepended."""
        n = len(zeta_future) + 1
        if self.chi_prev is None:
            return np.zeros((n, 6))
        seq = np.vstack([self.zeta_prev[None, :], np.atleast_2d(zeta_future)]) if len(zeta_future) \
            else self.zeta_prev[None, :]
        chi = predict_wrench_horizon(self.model, self.chi_prev, seq, self.A, self.B)
        # guard the controller against runaway horizon predictions
        lo, hi = self.model.norm.envelope(self.envelope_margin)
        return np.clip(chi, lo, hi)
