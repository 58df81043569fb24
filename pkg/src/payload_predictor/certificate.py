"""Global prediction-error certificate for a trained lifted model.

All bound arithmetic happens in the standardized space used for training.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import lipschitz_certificate
from .lls import LiftedModel

DEFAULT_N_LIST = (1, 5, 10, 20, 40)


class UnstableModelWarning(UserWarning):
    pass


@dataclass
class BoundCertificate:
    alpha_chi: float
    alpha_zeta: float
    L_Phi: float
    C_norm: float
    CA_norm: float
    CB_norm: float
    recon_sup: float
    c: float
    spectral_radius: float
    stable: bool
    partial_sums: list = field(default_factory=list)

    def bound(self, n):
        """c times the sum of ||A^i|| for i < n (0 for n = 0)."""
        if n <= 0:
            return 0.0
        if n > len(self.partial_sums):
            raise ValueError(f"certificate only covers n <= {len(self.partial_sums)}")
        return self.c * self.partial_sums[n - 1]

    def to_dict(self):
        d = asdict(self)
        d["stable"] = bool(self.stable)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _stack(sets):
    if hasattr(sets, "chi"):
        sets = [sets]
    return list(sets)


def _normalized(sets, norm):
    out = []
    for s in _stack(sets):
        chi, zeta = np.asarray(s.chi, dtype=float), np.asarray(s.zeta, dtype=float)
        if norm is not None:
            chi, zeta = norm.chi(chi), norm.zeta(zeta)
        out.append((chi, zeta))
    return out


def estimate_alphas(log, norm=None):
    """Largest consecutive-sample change of chi and zeta (Euclidean norm).

    ``log`` is a labeled set (or a list of them); pairs never straddle two
    flights. Pass the model's ``NormStats`` to work in training space.
    """
    a_chi = a_zeta = 0.0
    for chi, zeta in _normalized(log, norm):
        if len(chi) < 2:
            raise ValueError("need at least two samples")
        a_chi = max(a_chi, float(np.max(np.linalg.norm(np.diff(chi, axis=0), axis=1))))
        a_zeta = max(a_zeta, float(np.max(np.linalg.norm(np.diff(zeta, axis=0), axis=1))))
    return a_chi, a_zeta


def power_norm_partial_sums(A, n_max):
    """[sum_{i<n} ||A^i||_2 for n = 1..n_max]."""
    out = np.empty(n_max)
    P = np.eye(A.shape[0])
    total = 0.0
    for n in range(n_max):
        total += np.linalg.norm(P, 2)
        out[n] = total
        P = A @ P
    return out


def build_certificate(model: LiftedModel, eval_set, n_max=40, alphas=None):
    """Certificate for ``model`` over the label set ``eval_set``.

    ``eval_set`` should hold every label the bound is meant to cover (the
    union of training and evaluation flights).
    """
    norm = model.norm
    if alphas is None:
        alphas = estimate_alphas(eval_set, norm)
    a_chi, a_zeta = alphas
    recon = 0.0
    for chi, _ in _normalized(eval_set, norm):
        z = model.encode(norm.chi_inv(chi))
        recon = max(recon, float(np.max(np.linalg.norm(chi - z @ model.C.T, axis=1))))
    L = lipschitz_certificate(model.params)
    CA = float(np.linalg.norm(model.C @ model.A, 2))
    CB = float(np.linalg.norm(model.C @ model.B, 2))
    c = (CA * L + 1.0) * a_chi + CB * a_zeta + recon
    rho = model.spectral_radius()
    stable = bool(rho <= 1.0 + 1e-6)
    if not stable:
        warnings.warn(f"spectral radius {rho:.6f} > 1; the bound assumes stable dynamics",
                      UnstableModelWarning)
    return BoundCertificate(alpha_chi=a_chi, alpha_zeta=a_zeta, L_Phi=L,
                            C_norm=float(np.linalg.norm(model.C, 2)), CA_norm=CA, CB_norm=CB,
                            recon_sup=recon, c=float(c), spectral_radius=rho, stable=stable,
                            partial_sums=power_norm_partial_sums(model.A, n_max).tolist())


@dataclass
class BoundRow:
    n: int
    starts: int
    violations: int
    max_ratio: float
    max_error: float
    bound: float


def rollout_errors(model: LiftedModel, chi_n, zeta_n, n):
    """||Phi(chi_{k+n}) - z_hat_{k+n}|| for every start k, where z_hat is the
    n-step rollout of (A, B) from Phi(chi_k) driven by zeta_k..zeta_{k+n-1}."""
    from .embedding import embed

    Z = embed(chi_n, model.params)
    starts = len(Z) - n
    if starts <= 0:
        return np.empty(0)
    Zh = Z[:starts].copy()
    U = zeta_n @ model.B.T
    for i in range(n):
        Zh = Zh @ model.A.T + U[i:i + starts]
    return np.linalg.norm(Z[n:n + starts] - Zh, axis=1)


def verify_global_bound(model: LiftedModel, cert: BoundCertificate, log, n_list=DEFAULT_N_LIST):
    """Check ||E_n|| <= c sum_{i<n} ||A^i|| at every start index of ``log``."""
    data = _normalized(log, model.norm)
    rows = []
    for n in n_list:
        b = cert.bound(n)
        errs = np.concatenate([rollout_errors(model, chi, zeta, n) for chi, zeta in data]) \
            if n > 0 else np.zeros(sum(len(c) for c, _ in data))
        if errs.size == 0:
            raise ValueError(f"log too short for n = {n}")
        worst = float(errs.max())
        ratio = worst / b if b > 0 else (0.0 if worst == 0 else np.inf)
        rows.append(BoundRow(n=int(n), starts=int(errs.size), violations=int(np.sum(errs > b)),
                             max_ratio=float(ratio), max_error=worst, bound=float(b)))
    return rows


def write_report_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "starts", "violations", "max_ratio"])
        for r in rows:
            w.writerow([r.n, r.starts, r.violations, repr(r.max_ratio)])
