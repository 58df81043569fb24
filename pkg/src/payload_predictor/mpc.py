"""Receding-horizon control with a learned wrench term.

The optimal control problem is solved by single-shooting Gauss-Newton SQP:
the input sequence is the decision variable, each iteration linearizes the
dynamics along the current rollout (finite differences in tangent
coordinates), solves the condensed box-constrained QP and takes a
line-search step on an l1 merit function. The predicted wrench sequence is
recomputed from the current state guess at the start of every iteration and
held fixed within it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import quadprog
from scipy import linalg

from . import kernels
from .errors import ConfigError, NumericalError
from .labeling import OnlineLabeler
from .lls import LiftedModel, OnlinePredictor
from .rotations import quat_log_batch, quat_mul_batch, right_jacobian_inv_batch
from .sim import PlantParams

STATUS_OPTIMAL = "optimal"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible"


def _diag(v, n):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.eye(n) * float(v)
    if v.ndim == 1:
        return np.diag(v)
    return v


@dataclass
class MpcConfig:
    N: int = 20
    dt: float = 0.02
    Q: np.ndarray = field(default_factory=lambda: np.diag([40.0] * 3 + [4.0] * 3 + [10.0] * 3 + [1.0] * 3))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.5, 1.0, 1.0, 1.0]))
    P: np.ndarray | None = None
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    v_max: float = 8.0
    w_max: float = 8.0
    terminal_halfwidth: float = 2.0
    max_sqp_iter: int = 5
    kkt_tol: float = 1e-6
    qp_tol: float = 1e-9
    nsub: int = 1
    fd_eps: float = 1e-6
    discrete_add: bool = False
    merit_rho: float = 1e4
    feedforward: bool = True

    def __post_init__(self):
        self.Q = _diag(self.Q, 12)
        self.R = _diag(self.R, 4)
        self.P = 5.0 * self.Q if self.P is None else _diag(self.P, len(self.Q))

    def validate(self):
        if self.N < 1:
            raise ConfigError("horizon N must be at least 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        for name in ("Q", "P"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ConfigError(f"{name} must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ConfigError("R must be symmetric positive definite")
        if self.max_sqp_iter < 1 or self.nsub < 1:
            raise ConfigError("max_sqp_iter and nsub must be positive")

    def input_bounds(self, params: PlantParams):
        lo = np.array([0.0, -1.0, -1.0, -1.0]) if self.u_min is None else np.asarray(self.u_min, float)
        hi = (np.array([params.f_max, params.tau_max, params.tau_max, params.tau_max])
              if self.u_max is None else np.asarray(self.u_max, float))
        return lo, hi


@dataclass
class OcpSolution:
    u_seq: np.ndarray
    x_seq: np.ndarray
    cost: float
    iterations: int
    kkt_residual: float
    status: str
    chi_hat: np.ndarray
    relaxed_terminal: bool = False
    costs: list = field(default_factory=list)


# ------------------------------------------------------------- dynamics


class QuadDynamics:
    """Nominal quadrotor model with an exogenous wrench per stage."""

    nx = 13
    ndx = 12
    nu = 4

    def __init__(self, params: PlantParams, dt=0.02, nsub=1, discrete_add=False, eps=1e-6):
        self.params = params
        self.qp = params.quad_vector()
        self.dt = dt
        self.nsub = nsub
        self.discrete_add = discrete_add
        self.eps = eps
        self._minv = 1.0 / params.m
        self._Jinv = np.linalg.inv(params.J)

    def _inject(self, x, chi):
        x = x.copy()
        x[3:6] += self.dt * self._minv * chi[0:3]
        x[10:13] += self.dt * (self._Jinv @ chi[3:6])
        return x

    def step(self, x, u, chi=None):
        chi = np.zeros(6) if chi is None else np.asarray(chi, dtype=float)
        if self.discrete_add:
            return self._inject(kernels.quad_integrate(x, u, np.zeros(6), self.qp, self.dt, self.nsub), chi)
        return kernels.quad_integrate(x, u, chi, self.qp, self.dt, self.nsub)

    def rollout(self, x0, us, chis):
        if self.discrete_add:
            xs = np.empty((len(us) + 1, 13))
            xs[0] = x0
            for i in range(len(us)):
                xs[i + 1] = self.step(xs[i], us[i], chis[i])
            return xs
        return kernels.quad_rollout(x0, us, chis, self.qp, self.dt, self.nsub)

    def linearize(self, xs, us, chis):
        # the injected wrench does not depend on state or input, so the
        # discrete-add variant shares the Jacobians of the nominal map
        # up to the velocity offsets, which drop out of differences
        ws = np.zeros_like(chis) if self.discrete_add else chis
        return kernels.quad_linearize(xs, us, ws, self.qp, self.dt, self.nsub, self.eps)

    @staticmethod
    def errors(xs, xrs):
        """Tangent-space tracking errors [dp, dv, Log(q_ref^-1 q), domega] per row."""
        xs = np.atleast_2d(xs)
        xrs = np.atleast_2d(xrs)
        qc = xrs[:, 6:10] * np.array([1.0, -1.0, -1.0, -1.0])
        dq = quat_mul_batch(qc, xs[:, 6:10])
        return np.hstack([xs[:, 0:6] - xrs[:, 0:6], quat_log_batch(dq), xs[:, 10:13] - xrs[:, 10:13]])

    @staticmethod
    def error_jacs(xs, xrs):
        xs = np.atleast_2d(xs)
        xrs = np.atleast_2d(xrs)
        qc = xrs[:, 6:10] * np.array([1.0, -1.0, -1.0, -1.0])
        phi = quat_log_batch(quat_mul_batch(qc, xs[:, 6:10]))
        E = np.repeat(np.eye(12)[None], len(xs), axis=0)
        E[:, 6:9, 6:9] = right_jacobian_inv_batch(phi)
        return E

    def error(self, x, xr):
        return self.errors(x, xr)[0]

    def error_jac(self, x, xr):
        return self.error_jacs(x, xr)[0]

    @staticmethod
    def zeta(xs):
        xs = np.atleast_2d(xs)
        return np.hstack([xs[:, 3:6], xs[:, 10:13]])

    # state box on velocity and body rates, terminal box on position
    box_state_idx = np.array([3, 4, 5, 10, 11, 12])
    box_tangent_idx = np.array([3, 4, 5, 9, 10, 11])
    terminal_state_idx = np.array([0, 1, 2])
    terminal_tangent_idx = np.array([0, 1, 2])

    def box_limits(self, cfg):
        return np.array([cfg.v_max] * 3 + [cfg.w_max] * 3)

    @staticmethod
    def compensated_inputs(x_ref, u_ref, chis):
        """Reference inputs that cancel the predicted wrench: the thrust is the
        norm of the reference thrust vector minus the predicted force, the
        torque the reference torque minus the predicted torque."""
        q = x_ref[:, 6:10]
        w, x, y, z = q.T
        zb = np.column_stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)])
        out = u_ref.copy()
        out[:, 0] = np.linalg.norm(zb * u_ref[:, 0:1] - chis[:, 0:3], axis=1)
        out[:, 1:4] = u_ref[:, 1:4] - chis[:, 3:6]
        return out


class LinearDynamics:
    """Linear time-invariant model x+ = A x + B u; used to check the solver
    against a Riccati recursion. The wrench argument is ignored."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.nx = self.ndx = self.A.shape[0]
        self.nu = self.B.shape[1]

    def step(self, x, u, chi=None):
        return self.A @ x + self.B @ u

    def rollout(self, x0, us, chis):
        xs = np.empty((len(us) + 1, self.nx))
        xs[0] = x0
        for i, u in enumerate(us):
            xs[i + 1] = self.A @ xs[i] + self.B @ u
        return xs

    def linearize(self, xs, us, chis):
        n = len(us)
        return np.repeat(self.A[None], n, axis=0), np.repeat(self.B[None], n, axis=0)

    @staticmethod
    def errors(xs, xrs):
        return np.atleast_2d(xs) - np.atleast_2d(xrs)

    def error_jacs(self, xs, xrs):
        return np.repeat(np.eye(self.nx)[None], len(np.atleast_2d(xs)), axis=0)

    @staticmethod
    def zeta(xs):
        return np.zeros((len(np.atleast_2d(xs)), 6))

    box_state_idx = None


def f_nominal(x, u, params: PlantParams, dt=0.02, nsub=1):
    """One step of the payload-free quadrotor model."""
    return kernels.quad_integrate(x, u, np.zeros(6), params.quad_vector(), dt, nsub)


def f_hybrid(x, u, chi_hat, params: PlantParams, dt=0.02, nsub=1, discrete_add=False):
    """Nominal step with the predicted wrench injected into the vector field
    (or added after the step with ``discrete_add``)."""
    return QuadDynamics(params, dt, nsub, discrete_add).step(x, u, chi_hat)


# ------------------------------------------------------------- solver


class _WrenchSource:
    """Normalizes the wrench argument of solve_ocp."""

    def __init__(self, wrench, N):
        self.N = N
        self.fixed = None
        self.predictor = None
        if wrench is None:
            self.fixed = np.zeros((N, 6))
        elif hasattr(wrench, "predict"):
            self.predictor = wrench
        else:
            w = np.asarray(wrench, dtype=float)
            self.fixed = np.tile(w, (N, 1)) if w.ndim == 1 else w[:N].copy()

    def __call__(self, xs, dyn):
        if self.predictor is None:
            return self.fixed
        chi = self.predictor.predict(dyn.zeta(xs[:self.N - 1]))
        if not np.all(np.isfinite(chi)):
            raise NumericalError("non-finite wrench prediction")
        return chi


def _cost_terms(dyn, xs, us, x_ref, u_ref, cfg):
    N = len(us)
    es = dyn.errors(xs, x_ref)
    du = us - u_ref
    J = (np.sum((es[:N] @ cfg.Q) * es[:N]) + es[N] @ cfg.P @ es[N]
         + np.sum((du @ cfg.R) * du))
    return float(J), es


def _has_box(dyn):
    return getattr(dyn, "box_state_idx", None) is not None


def _box_violation(dyn, xs, x_ref, cfg, terminal=True):
    if not _has_box(dyn):
        return 0.0
    lim = dyn.box_limits(cfg)
    viol = float(np.sum(np.maximum(np.abs(xs[1:, dyn.box_state_idx]) - lim, 0.0)))
    if terminal and np.isfinite(cfg.terminal_halfwidth):
        idx = dyn.terminal_state_idx
        d = np.abs(xs[-1, idx] - x_ref[-1, idx])
        viol += float(np.sum(np.maximum(d - cfg.terminal_halfwidth, 0.0)))
    return viol


def _sensitivity(Ad, Bd):
    """G[i]: response of the tangent state i+1 to the stacked input perturbation."""
    N, nd, nu = Bd.shape
    G = np.zeros((N, nd, N * nu))
    G[0, :, 0:nu] = Bd[0]
    for i in range(1, N):
        G[i, :, :i * nu] = Ad[i] @ G[i - 1, :, :i * nu]
        G[i, :, i * nu:(i + 1) * nu] = Bd[i]
    return G


def _state_rows(dyn, xs, x_ref, G, cfg, terminal, margin):
    """Linearized box rows (S du >= b) for entries within ``margin`` of a bound."""
    n = G.shape[2]
    if not _has_box(dyn):
        return np.zeros((0, n)), np.zeros(0)
    rows, rhs = [], []
    lim = dyn.box_limits(cfg)
    vals = xs[1:, dyn.box_state_idx]
    near = np.abs(vals) > lim - margin
    for i, r in zip(*np.nonzero(near)):
        S = G[i, dyn.box_tangent_idx[r]]
        # -lim <= val + S du <= lim
        rows += [-S, S]
        rhs += [vals[i, r] - lim[r], -lim[r] - vals[i, r]]
    if terminal and np.isfinite(cfg.terminal_halfwidth):
        h = cfg.terminal_halfwidth
        val = xs[-1, dyn.terminal_state_idx] - x_ref[-1, dyn.terminal_state_idx]
        for r in np.flatnonzero(np.abs(val) > h - margin):
            S = G[-1, dyn.terminal_tangent_idx[r]]
            rows += [-S, S]
            rhs += [val[r] - h, -h - val[r]]
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.array(rows), np.array(rhs)


def _solve_qp(H, g, lo, hi, S_rows, s_rhs):
    """min 1/2 du^T H du + g^T du  s.t.  lo <= du <= hi,  S_rows du >= s_rhs.

    The unconstrained minimizer is returned when it is feasible; otherwise
    the dual active-set solver handles the inequalities. Raises ValueError
    when the constraints are inconsistent.
    """
    try:
        Lc = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("QP Hessian is not positive definite") from exc
    du = -linalg.cho_solve(Lc, g, check_finite=False)
    if np.all(du >= lo - 1e-12) and np.all(du <= hi + 1e-12) and (
            len(s_rhs) == 0 or np.all(S_rows @ du >= s_rhs - 1e-12)):
        return du
    n = len(g)
    finite_lo = np.isfinite(lo)
    finite_hi = np.isfinite(hi)
    Cm = np.vstack([np.eye(n)[finite_lo], -np.eye(n)[finite_hi], S_rows]).T
    b = np.concatenate([lo[finite_lo], -hi[finite_hi], s_rhs])
    return quadprog.solve_qp(0.5 * (H + H.T), -g, Cm, b, 0)[0]


def _linear_prediction(dyn, xs, G, du):
    """Box-relevant state entries after a linearized step."""
    out = xs.copy()
    dx = G @ du
    if not _has_box(dyn):
        out[1:] += dx
        return out
    out[1:, dyn.box_state_idx] += dx[:, dyn.box_tangent_idx]
    out[1:, dyn.terminal_state_idx] += dx[:, dyn.terminal_tangent_idx]
    return out


def solve_ocp(x0, x_ref, u_ref, dyn, cfg: MpcConfig, wrench=None, u_init=None, u_bounds=None):
    """Solve the tracking problem from x0.

    ``x_ref`` holds N+1 reference states, ``u_ref`` N reference inputs.
    ``wrench`` is None (nominal MPC), an (N, 6)/(6,) array of fixed
    wrenches or an object with ``predict(zeta_future)``.
    """
    N = cfg.N
    x_ref = np.asarray(x_ref, dtype=float)[:N + 1]
    u_ref = np.asarray(u_ref, dtype=float)[:N]
    nu = dyn.nu
    if u_bounds is None:
        lo_u = np.full(nu, -np.inf)
        hi_u = np.full(nu, np.inf)
    else:
        lo_u, hi_u = (np.asarray(b, dtype=float) for b in u_bounds)
    lo_all = np.tile(lo_u, N)
    hi_all = np.tile(hi_u, N)
    source = _WrenchSource(wrench, N)
    u_ref0 = u_ref
    ff = cfg.feedforward and hasattr(dyn, "compensated_inputs") and wrench is not None
    if ff and u_init is None:
        us = dyn.compensated_inputs(x_ref[:N], u_ref, source(dyn.rollout(x0, u_ref, np.zeros((N, 6))), dyn))
    else:
        us = u_ref.copy() if u_init is None else np.array(u_init, dtype=float)[:N]
    us = np.clip(us, lo_u, hi_u)
    Rb = np.kron(np.eye(N), cfg.R)
    W = np.repeat(cfg.Q[None], N, axis=0)
    W[-1] = cfg.P
    terminal = True
    relaxed = False
    status = STATUS_MAX_ITER
    kkt = np.inf
    costs = []

    xs = dyn.rollout(x0, us, np.zeros((N, 6)))
    chis = None
    it = 0
    for it in range(1, cfg.max_sqp_iter + 1):
        chis = source(xs, dyn)
        if ff:
            u_ref = dyn.compensated_inputs(x_ref[:N], u_ref0, chis)
        xs = dyn.rollout(x0, us, chis)
        if not np.all(np.isfinite(xs)):
            raise NumericalError("non-finite rollout in SQP")
        J0, es = _cost_terms(dyn, xs, us, x_ref, u_ref, cfg)
        phi0 = J0 + cfg.merit_rho * _box_violation(dyn, xs, x_ref, cfg, terminal)
        costs.append(J0)
        Ad, Bd = dyn.linearize(xs, us, chis)
        G = _sensitivity(Ad, Bd)
        EG = dyn.error_jacs(xs[1:], x_ref[1:]) @ G
        WEG = W @ EG
        nd = EG.shape[1]
        EGf = EG.reshape(N * nd, -1)
        H = 2.0 * (EGf.T @ WEG.reshape(N * nd, -1) + Rb)
        g = 2.0 * (np.einsum("nij,ni->j", WEG, es[1:]) + Rb @ (us - u_ref).ravel())
        lo = lo_all - us.ravel()
        hi = hi_all - us.ravel()
        du = None
        margin = 0.0
        for _ in range(4):
            S_rows, s_rhs = _state_rows(dyn, xs, x_ref, G, cfg, terminal, margin)
            try:
                du = _solve_qp(H, g, lo, hi, S_rows, s_rhs)
            except ValueError:
                du = None
                if terminal and not relaxed:
                    terminal = False
                    relaxed = True
                    continue
                break
            # constraint generation: add every near-active row if the
            # linearized step leaves the box
            if _box_violation(dyn, _linear_prediction(dyn, xs, G, du), x_ref, cfg, terminal) <= 1e-9:
                break
            margin = np.inf
        if du is None:
            status = STATUS_INFEASIBLE
            break
        # H du = -(g - C^T lambda): stationarity residual at the iterate
        kkt = float(np.max(np.abs(H @ du))) + _box_violation(dyn, xs, x_ref, cfg, terminal)
        if kkt <= cfg.kkt_tol or float(np.max(np.abs(du))) <= 1e-10:
            status = STATUS_OPTIMAL
            break
        slope = float(g @ du)
        du_m = du.reshape(N, nu)
        alpha = 1.0
        accepted = False
        while alpha >= 1e-4:
            us_try = us + alpha * du_m
            xs_try = dyn.rollout(x0, us_try, chis)
            if np.all(np.isfinite(xs_try)):
                J_try, _ = _cost_terms(dyn, xs_try, us_try, x_ref, u_ref, cfg)
                phi = J_try + cfg.merit_rho * _box_violation(dyn, xs_try, x_ref, cfg, terminal)
                if phi <= phi0 + 1e-4 * alpha * min(slope, 0.0):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        us = us_try
        xs = xs_try
    cost, _ = _cost_terms(dyn, xs, us, x_ref, u_ref, cfg)
    return OcpSolution(u_seq=us, x_seq=xs, cost=cost, iterations=it, kkt_residual=kkt,
                       status=status, chi_hat=np.array(chis), relaxed_terminal=relaxed, costs=costs)


# ------------------------------------------------------------- controller


class MpcController:
    """Receding-horizon controller for simulate_closed_loop.

    With a model the online pipeline runs each tick: label the previous
    sample, refit on the window, predict the wrench over the horizon.
    Without a model it is the nominal controller.
    """

    def __init__(self, params: PlantParams, cfg: MpcConfig | None = None,
                 model: LiftedModel | None = None, refit=True, fixed_wrench=None,
                 max_infeasible=5):
        self.params = params
        self.cfg = cfg or MpcConfig()
        self.cfg.validate()
        self.dyn = QuadDynamics(params, self.cfg.dt, self.cfg.nsub, self.cfg.discrete_add,
                                self.cfg.fd_eps)
        self.bounds = self.cfg.input_bounds(params)
        self.model = model
        self.refit = refit
        self.fixed_wrench = fixed_wrench
        self.max_infeasible = max_infeasible
        self.horizon = self.cfg.N
        self.reset()

    def reset(self):
        self.labeler = OnlineLabeler(self.params, self.cfg.dt)
        self.predictor = OnlinePredictor(self.model, self.refit) if self.model is not None else None
        self.u_prev = None
        self.u_warm = None
        self.infeasible = 0
        self.last_diagnostics = {}
        self.last_solution = None

    def __call__(self, k, t, x, cache):
        t0 = time.perf_counter()
        refit_ms = 0.0
        if self.predictor is not None:
            lab = self.labeler.push(x, self.u_prev)
            if lab is not None:
                t1 = time.perf_counter()
                self.predictor.update(*lab)
                refit_ms = (time.perf_counter() - t1) * 1e3
        x_ref, u_ref = cache.window(k, self.cfg.N)
        wrench = self.predictor if self.predictor is not None else self.fixed_wrench
        u_init = None
        if self.u_warm is not None:
            u_init = np.vstack([self.u_warm[1:], self.u_warm[-1:]])
        sol = solve_ocp(x, x_ref, u_ref, self.dyn, self.cfg, wrench=wrench, u_init=u_init,
                        u_bounds=self.bounds)
        if sol.status == STATUS_INFEASIBLE:
            self.infeasible += 1
            if self.infeasible >= self.max_infeasible:
                raise NumericalError(f"solver infeasible for {self.infeasible} consecutive ticks")
        else:
            self.infeasible = 0
        self.u_warm = sol.u_seq
        self.u_prev = sol.u_seq[0].copy()
        self.last_solution = sol
        solve_ms = (time.perf_counter() - t0) * 1e3
        diag = {f"{c}_hat": float(v) for c, v in zip(("fex", "fey", "fez", "tex", "tey", "tez"),
                                                   sol.chi_hat[0])}
        diag.update(solve_ms=solve_ms, refit_ms=refit_ms, sqp_iters=float(sol.iterations),
                    status=sol.status)
        self.last_diagnostics = diag
        return self.u_prev


def run_closed_loop(plant_params: PlantParams, cfg: MpcConfig | None = None, model=None,
                    ref_kind="circle", duration=10.0, ref_params=None, events=(), payload=None,
                    refit=True, fixed_wrench=None, x0=None):
    """Closed-loop run of the (nominal or learned-wrench) MPC on the plant.

    The controller plans with the payload-free nominal model; the plant
    carries the payload given by ``plant_params``.
    """
    from .sim import RefParams, Reference, simulate_closed_loop

    cfg = cfg or MpcConfig()
    nominal = plant_params.nominal()
    ctrl = MpcController(nominal, replace(cfg), model=model, refit=refit, fixed_wrench=fixed_wrench)
    rp = replace(ref_params or RefParams(m=nominal.m, J=nominal.J, g=nominal.g), kind=ref_kind)
    return simulate_closed_loop(ctrl, plant_params, Reference(rp), duration, rate=1.0 / cfg.dt,
                                events=events, x0=x0, payload=payload)
