"""Offline training of the embedding and decoder with the three-term
forward/backward/reconstruction loss, and evaluation of trained models."""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .embedding import (MlpParams, SpectralNormalizer, apply_spectral_normalization, backprop_mlp,
                        forward_with_cache, init_mlp, lipschitz_certificate)
from .errors import ConfigError, NumericalError, SchemaError, SingularDynamicsError
from .labeling import LabeledSet
from .lls import (IllConditionedWarning, LiftedModel, NormStats, OnlinePredictor, backward_factor,
                  fit_AB, predict_wrench_horizon)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    mu1: float = 0.999
    mu2: float = 0.999
    epochs: int = 200
    batch_size: int = 16
    m: int = 40
    lr: float = 1e-3
    seed: int = 0
    gamma: float = 10.0
    K: int = 24
    hidden: int = 128
    window_T: int = 40
    ridge: float = 1e-3
    discount: str = "step"
    tol: float = 1e-5
    patience: int = 20
    use_bias: bool = True
    rollout_clamp: float = 0.1

    def validate(self):
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not (0 <= self.mu1 < 1 and 0 <= self.mu2 < 1):
            raise ConfigError("discount factors must lie in [0, 1)")
        if self.m < 3:
            raise ConfigError("segment length m must be at least 3")
        if self.discount not in ("step", "trajectory"):
            raise ConfigError(f"unknown discount mode {self.discount!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.K < 1:
            raise ConfigError("invalid optimizer settings")
        if self.window_T < 3:
            raise ConfigError("window_T must be at least 3")

    def hash(self):
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


@dataclass
class TrainedModel:
    model: LiftedModel
    loss_curve: list = field(default_factory=list)
    config_hash: str = ""
    data_hash: str = ""
    lipschitz: float = float("nan")
    singular_segments: int = 0

    def loss_curve_csv(self, path_or_buf):
        from .trajlog import write_columns_csv

        arr = np.array(self.loss_curve, dtype=float).reshape(-1, 5)
        write_columns_csv(path_or_buf, {
            "epoch": [int(e) for e in arr[:, 0]], "L": arr[:, 1], "L_fwd": arr[:, 2],
            "L_bwd": arr[:, 3], "L_rec": arr[:, 4],
        })


def make_segments(chi, zeta, m):
    """Overlapping windows of length m with stride m // 2, chronological."""
    chi = np.asarray(chi)
    zeta = np.asarray(zeta)
    n = len(chi)
    if n < m:
        raise SchemaError(f"log has {n} samples, segment length is {m}")
    stride = max(m // 2, 1)
    return [(chi[s:s + m], zeta[s:s + m]) for s in range(0, n - m + 1, stride)]


@dataclass
class SegmentLoss:
    L: float
    L_fwd: float
    L_bwd: float
    L_rec: float
    singular: bool = False


def _discounts(mu, n):
    # 0 ** 0 == 1 in numpy, so mu = 0 keeps the first term only
    return np.power(float(mu), np.arange(n))


def compute_losses(chi, zeta, params: MlpParams, C, cfg: TrainConfig, AB=None, grad=False):
    """Three-term loss of one segment in normalized coordinates.

    (A, B) are fitted on the segment's embedding unless ``AB`` is given and
    are treated as constants for differentiation. With ``grad=True`` also
    returns (dW, db, dC) with respect to the effective weights.
    """
    m = len(chi)
    Z, cache = forward_with_cache(chi, params)
    K = Z.shape[1]
    if AB is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            A, B = fit_AB(Z[:-1].T, Z[1:].T, zeta[:-1].T, ridge=cfg.ridge)
    else:
        A, B = AB
    Bu = zeta @ B.T
    dZ = np.zeros_like(Z)
    bf, bb = cfg.beta1, cfg.beta2

    # a rollout is truncated at the first step whose error exceeds
    # rollout_clamp times the mean embedding energy; truncated steps add
    # nothing (contracting modes make A^-1 expansive, so long backward
    # rollouts diverge)
    cap = cfg.rollout_clamp * float(np.mean(np.sum(Z * Z, axis=1))) / K

    # forward prediction from z_0
    step_disc = cfg.discount == "step"
    wf = _discounts(cfg.mu1 if step_disc else 1.0, m - 1)
    wf = wf / wf.sum()
    f = Z[0]
    e2 = np.zeros(m - 1)
    rf = np.zeros((m - 1, K))
    for k in range(1, m):
        f = A @ f + Bu[k - 1]
        r = Z[k] - f
        ek = float(r @ r) / K
        if not ek < cap:
            break
        e2[k - 1] = ek
        rf[k - 1] = r
    L_fwd = float(np.sum(wf * e2))
    if grad:
        gz = 2.0 * bf * wf[:, None] * rf / K
        dZ[1:] += gz
        lam = np.zeros(K)
        for k in range(m - 1, 0, -1):
            lam = -gz[k - 1] + lam
            lam = A.T @ lam
        dZ[0] += lam

    # backward prediction from z_{m-1}
    singular = False
    L_bwd = 0.0
    try:
        lu = backward_factor(A)
    except SingularDynamicsError:
        singular = True
    if not singular:
        wb = _discounts(cfg.mu2 if step_disc else 1.0, m - 1)[::-1]
        wb = wb / wb.sum()
        Bh = np.empty_like(Z)
        Bh[m - 1] = Z[m - 1]
        e2 = np.zeros(m - 1)
        rb = np.zeros((m - 1, K))
        for k in range(m - 2, -1, -1):
            Bh[k] = linalg.lu_solve(lu, Bh[k + 1] - Bu[k], check_finite=False)
            r = Z[k] - Bh[k]
            ek = float(r @ r) / K
            if not ek < cap:
                break
            e2[k] = ek
            rb[k] = r
        L_bwd = float(np.sum(wb * e2))
        if grad:
            gb = 2.0 * bb * wb[:, None] * rb / K
            dZ[:-1] += gb
            lam = np.zeros(K)
            for k in range(0, m - 1):
                lam = -gb[k] + lam
                lam = linalg.lu_solve(lu, lam, check_finite=False, trans=1)
            dZ[m - 1] += lam

    # reconstruction
    rr = chi - Z @ C.T
    L_rec = float(np.mean(np.sum(rr * rr, axis=1)))
    L = cfg.beta1 * L_fwd + cfg.beta2 * L_bwd + cfg.beta3 * L_rec
    out = SegmentLoss(L, L_fwd, L_bwd, L_rec, singular)
    if not grad:
        return out
    dC = -2.0 * cfg.beta3 * rr.T @ Z / m
    dZ -= 2.0 * cfg.beta3 * rr @ C / m
    dW, db = backprop_mlp(dZ, cache, params)
    return out, (dW, db, dC)


class _Adam:
    def __init__(self, shapes, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for x, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            x -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return ([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)

    def restore(self, st):
        self.m = [a.copy() for a in st[0]]
        self.v = [a.copy() for a in st[1]]
        self.t = st[2]


def _as_sets(dataset):
    if isinstance(dataset, LabeledSet):
        return [dataset]
    return list(dataset)


def data_hash(sets):
    h = hashlib.sha256()
    for s in sets:
        h.update(np.ascontiguousarray(s.chi).tobytes())
        h.update(np.ascontiguousarray(s.zeta).tobytes())
    return h.hexdigest()[:16]


def batch_losses(segments, params, C, cfg, grad=False, weights=None, AB=None):
    """Weighted mean of segment losses (and gradients) over a batch.

    Vectorized over segments of equal length; matches ``compute_losses``
    applied segment by segment. ``AB`` optionally supplies per-segment
    (A, B) stacks of shape (nb, K, K) and (nb, K, 6) instead of fitting them.
    """
    X = np.stack([c for c, _ in segments])
    U = np.stack([z for _, z in segments])
    nb, m, _ = X.shape
    w = np.full(nb, 1.0 / nb) if weights is None else np.asarray(weights, float) / np.sum(weights)
    Zf, cache = forward_with_cache(X.reshape(nb * m, -1), params)
    K = Zf.shape[1]
    Z = Zf.reshape(nb, m, K)

    Psi = np.concatenate([Z[:, :-1], U[:, :-1]], axis=2)  # (nb, m-1, K+6)
    if AB is not None:
        AB = np.concatenate([np.asarray(AB[0]), np.asarray(AB[1])], axis=2)
    elif cfg.ridge > 0:
        G = np.einsum("bni,bnj->bij", Psi, Psi) + cfg.ridge * np.eye(K + 6)
        AB = np.linalg.solve(G, np.einsum("bni,bnj->bij", Psi, Z[:, 1:])).transpose(0, 2, 1)
    else:
        AB = np.stack([np.linalg.lstsq(P, Zn, rcond=None)[0].T for P, Zn in zip(Psi, Z[:, 1:])])
    A, B = AB[:, :, :K], AB[:, :, K:]
    Bu = np.einsum("bij,bnj->bni", B, U)
    cap = cfg.rollout_clamp * np.mean(np.sum(Z * Z, axis=2), axis=1) / K
    step_disc = cfg.discount == "step"
    dZ = np.zeros_like(Z)

    # forward rollouts
    wf = _discounts(cfg.mu1 if step_disc else 1.0, m - 1)
    wf = wf / wf.sum()
    f = Z[:, 0].copy()
    alive = np.ones(nb, dtype=bool)
    e2 = np.zeros((nb, m - 1))
    rf = np.zeros((nb, m - 1, K))
    for k in range(1, m):
        f = np.einsum("bij,bj->bi", A, f) + Bu[:, k - 1]
        r = Z[:, k] - f
        ek = np.sum(r * r, axis=1) / K
        alive &= ek < cap
        e2[alive, k - 1] = ek[alive]
        rf[alive, k - 1] = r[alive]
    L_fwd = e2 @ wf

    # backward rollouts, skipped for near-singular A
    conds = np.linalg.cond(A)
    ok = conds <= 1e10
    L_bwd = np.zeros(nb)
    wb = _discounts(cfg.mu2 if step_disc else 1.0, m - 1)[::-1]
    wb = wb / wb.sum()
    rb = np.zeros((nb, m - 1, K))
    Ainv = np.zeros_like(A)
    if ok.any():
        Ainv[ok] = np.linalg.inv(A[ok])
        bh = Z[:, m - 1].copy()
        alive = ok.copy()
        e2 = np.zeros((nb, m - 1))
        for k in range(m - 2, -1, -1):
            bh = np.einsum("bij,bj->bi", Ainv, bh - Bu[:, k])
            r = Z[:, k] - bh
            with np.errstate(over="ignore", invalid="ignore"):
                ek = np.sum(r * r, axis=1) / K
            alive &= ek < cap
            e2[alive, k] = ek[alive]
            rb[alive, k] = r[alive]
        L_bwd[ok] = e2[ok] @ wb

    rr = X - Z @ C.T
    L_rec = np.mean(np.sum(rr * rr, axis=2), axis=1)
    L = cfg.beta1 * L_fwd + cfg.beta2 * L_bwd + cfg.beta3 * L_rec
    tot = np.array([w @ L, w @ L_fwd, w @ L_bwd, w @ L_rec])
    singular = int(np.sum(~ok))
    out = SegmentLoss(*tot, singular=bool(singular))
    out.n_singular = singular
    if not grad:
        return out

    gz = (2.0 * cfg.beta1 / K) * (w[:, None, None] * wf[None, :, None]) * rf
    dZ[:, 1:] += gz
    lam = np.zeros((nb, K))
    for k in range(m - 1, 0, -1):
        lam = np.einsum("bji,bj->bi", A, lam - gz[:, k - 1])
    dZ[:, 0] += lam
    gb = (2.0 * cfg.beta2 / K) * (w[:, None, None] * wb[None, :, None]) * rb
    dZ[:, :-1] += gb
    lam = np.zeros((nb, K))
    for k in range(0, m - 1):
        lam = np.einsum("bji,bj->bi", Ainv, lam - gb[:, k])
    dZ[:, m - 1] += lam
    wr = (2.0 * cfg.beta3 / m) * w[:, None, None] * rr
    dC = -np.einsum("bni,bnj->ij", wr, Z)
    dZ -= wr @ C
    dW, db = backprop_mlp(dZ.reshape(nb * m, K), cache, params)
    return out, (dW, db, dC)


def _segment_weights(cfg, idx):
    # literal reading: discount by the trajectory (segment) index in the batch
    if cfg.discount == "trajectory":
        return np.power(cfg.mu1, np.arange(len(idx)))
    return None


def fit_full_AB(sets, params, norm: NormStats, ridge):
    """(A, B) on all consecutive pairs of the standardized training set
    (pairs never straddle two trajectories)."""
    Z0, Z1, U0 = [], [], []
    from .embedding import embed

    for s in sets:
        Z = embed(norm.chi(s.chi), params)
        U = norm.zeta(s.zeta)
        Z0.append(Z[:-1])
        Z1.append(Z[1:])
        U0.append(U[:-1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        return fit_AB(np.vstack(Z0).T, np.vstack(Z1).T, np.vstack(U0).T, ridge=ridge)


def fit_full_C(sets, params, norm: NormStats, ridge):
    """Least-squares decoder on the whole standardized training set."""
    from .embedding import embed

    Z = np.vstack([embed(norm.chi(s.chi), params) for s in sets])
    X = np.vstack([norm.chi(s.chi) for s in sets])
    G = Z.T @ Z + ridge * np.eye(Z.shape[1])
    return linalg.solve(G, Z.T @ X, assume_a="pos").T


def train(dataset, cfg: TrainConfig | None = None, t_s=None, callback=None) -> TrainedModel:
    """Train embedding and decoder on labeled trajectories.

    ``dataset`` is a LabeledSet or a list of them (one per flight).
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    sets = _as_sets(dataset)
    if not sets:
        raise SchemaError("empty dataset")
    full = LabeledSet.concatenate(sets)
    for s in sets:
        if not (np.all(np.isfinite(s.chi)) and np.all(np.isfinite(s.zeta))):
            raise NumericalError("non-finite training labels")
    if t_s is None:
        t_s = float(np.median(np.diff(sets[0].t))) if len(sets[0]) > 1 else 0.02
    norm = NormStats.fit(full.chi, full.zeta)
    segments = []
    for s in sets:
        if len(s) >= cfg.m:
            segments.extend(make_segments(norm.chi(s.chi), norm.zeta(s.zeta), cfg.m))
    if not segments:
        raise SchemaError(f"no trajectory has at least m = {cfg.m} samples")

    rng = np.random.default_rng(cfg.seed)
    raw = init_mlp((6, cfg.hidden, cfg.hidden, cfg.K), cfg.gamma, seed=cfg.seed, use_bias=cfg.use_bias)
    C = rng.uniform(-1, 1, size=(6, cfg.K)) / np.sqrt(cfg.K)
    sn = SpectralNormalizer(raw, seed=cfg.seed)
    sn.normalize(raw, n_iter=50)
    opt = _Adam([W.shape for W in raw.weights] + [b.shape for b in raw.biases] + [C.shape])

    curve = []
    lr = cfg.lr
    halvings = 0
    best_hist = []
    epoch = 0
    while epoch < cfg.epochs:
        snapshot = (raw.copy(), C.copy(), opt.state(), [u.copy() for u in sn.u])
        order = rng.permutation(len(segments))
        lr_e = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(cfg.epochs, 1)))
        failed = False
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            eff = sn.normalize(raw, n_iter=1)
            loss, (gW, gb, gC) = batch_losses([segments[i] for i in idx], eff, C, cfg, grad=True,
                                              weights=_segment_weights(cfg, idx))
            grads = sn.backward(raw, gW) + gb + [gC]
            if not np.isfinite(loss.L) or not all(np.all(np.isfinite(g)) for g in grads):
                failed = True
                break
            opt.step(raw.weights + raw.biases + [C], grads, lr_e)
        if not failed:
            eff = sn.normalize(raw, n_iter=1)
            ev = batch_losses(segments, eff, C, cfg)
            failed = not np.isfinite(ev.L)
        if failed:
            if halvings >= 2:
                raise NumericalError(
                    f"training diverged at epoch {epoch} (lr {lr:.3g}, halved {halvings} times)")
            raw, C = snapshot[0], snapshot[1]
            opt.restore(snapshot[2])
            sn.u = snapshot[3]
            lr *= 0.5
            halvings += 1
            log.warning("non-finite loss at epoch %d; retrying with lr %.3g", epoch, lr)
            continue
        curve.append((epoch, ev.L, ev.L_fwd, ev.L_bwd, ev.L_rec))
        if callback is not None:
            callback(epoch, ev)
        best_hist.append(ev.L)
        epoch += 1
        if len(best_hist) > cfg.patience:
            # stop when the best loss of the last `patience` epochs improves
            # on the best before them by less than tol (relative)
            before = min(best_hist[:-cfg.patience])
            recent = min(best_hist[-cfg.patience:])
            if before - recent < cfg.tol * abs(before):
                break

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eff = apply_spectral_normalization(raw)
    A, B = fit_full_AB(sets, eff, norm, cfg.ridge)
    # Adam leaves the decoder slightly short of its optimum for the final
    # embedding; the closed-form fit removes most of the reconstruction bias
    C = fit_full_C(sets, eff, norm, cfg.ridge)
    model = LiftedModel(params=eff, C=C, A=A, B=B, t_s=t_s, window_T=cfg.window_T,
                        norm=norm, ridge=cfg.ridge)
    singular = batch_losses(segments, eff, C, cfg).n_singular
    return TrainedModel(model=model, loss_curve=curve, config_hash=cfg.hash(),
                        data_hash=data_hash(sets), lipschitz=lipschitz_certificate(eff),
                        singular_segments=int(singular))


@dataclass
class EvalResult:
    one_step: object
    multi_step: object
    horizon: int
    pred_one: np.ndarray
    truth_one: np.ndarray
    t_one: np.ndarray


def one_step_predictions(model: LiftedModel, data: LabeledSet, refit=True):
    """Online regime: at row k (after the label of row k is known and the
    window refit) predict the label of row k+1. Returns (t, pred, truth)."""
    pred_ = OnlinePredictor(model, refit=refit)
    n = len(data)
    out = np.empty((n - 1, 6))
    for k in range(n - 1):
        pred_.update(data.chi[k], data.zeta[k])
        out[k] = predict_wrench_horizon(model, data.chi[k], data.zeta[k:k + 1], pred_.A, pred_.B)[0]
    return data.t[1:], out, data.chi[1:]


def multi_step_predictions(model: LiftedModel, data: LabeledSet, n_ahead=10, refit=True):
    """Open-loop n-step predictions from every start, fed the true zeta."""
    pred_ = OnlinePredictor(model, refit=refit)
    n = len(data)
    rows = max(n - n_ahead, 0)
    out = np.empty((rows, 6))
    for k in range(rows):
        pred_.update(data.chi[k], data.zeta[k])
        out[k] = predict_wrench_horizon(model, data.chi[k], data.zeta[k:k + n_ahead],
                                        pred_.A, pred_.B)[-1]
    return data.t[n_ahead:n_ahead + rows], out, data.chi[n_ahead:n_ahead + rows]


def evaluate(model: LiftedModel, data: LabeledSet, n_ahead=10, refit=True) -> EvalResult:
    from .metrics import rmse_wrench

    t1, p1, y1 = one_step_predictions(model, data, refit)
    _, pn, yn = multi_step_predictions(model, data, n_ahead, refit)
    return EvalResult(rmse_wrench(p1, y1, label="one_step"),
                      rmse_wrench(pn, yn, label=f"{n_ahead}_step"), n_ahead, p1, y1, t1)
