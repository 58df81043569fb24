"""Ground-truth physics: quadrotor rigid body with a tethered point-mass payload,
linear residual drag, reference trajectories and closed-loop data collection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalError
from .rotations import quat_to_rot, rot_to_quat, vee
from .trajlog import TrajectoryLog

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])


@dataclass
class PlantParams:
    """Physical parameters. Defaults follow the 2.0 kg test vehicle with a
    0.8 m tether and a 260 g payload."""

    m: float = 2.0
    J: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.02, 0.04]))
    g: float = GRAVITY
    m_p: float = 0.26
    l: float = 0.8
    r_att: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -0.05]))
    D_v: np.ndarray = field(default_factory=lambda: np.diag([0.05, 0.05, 0.05]))
    D_omega: np.ndarray = field(default_factory=lambda: np.diag([0.005, 0.005, 0.005]))
    f_max: float | None = None
    tau_max: float = 1.0
    substep: float = 1e-3

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float).reshape(3, 3)
        self.r_att = np.asarray(self.r_att, dtype=float).reshape(3)
        self.D_v = _as_diag(self.D_v)
        self.D_omega = _as_diag(self.D_omega)
        if self.f_max is None:
            self.f_max = 2.5 * self.m * self.g
        if not self.m > 0:
            raise ConfigError("mass must be positive")
        if not np.allclose(self.J, self.J.T) or np.linalg.eigvalsh(self.J).min() <= 0:
            raise ConfigError("inertia must be symmetric positive definite")
        if not self.l > 0:
            raise ConfigError("tether length must be positive")
        if self.m_p < 0:
            raise ConfigError("payload mass must be nonnegative")

    def quad_vector(self):
        return np.concatenate([[self.m, self.g], self.J.ravel(), np.linalg.inv(self.J).ravel()])

    def plant_vector(self):
        return np.concatenate([
            self.quad_vector(), [self.m_p, self.l], self.r_att,
            np.diag(self.D_v), np.diag(self.D_omega),
        ])

    def nominal(self):
        """Quadrotor-only parameters: no payload, no drag."""
        return replace(self, m_p=0.0, D_v=np.zeros((3, 3)), D_omega=np.zeros((3, 3)))

    @property
    def hover_thrust(self):
        return self.m * self.g


def _as_diag(D):
    D = np.asarray(D, dtype=float)
    if D.ndim == 0:
        return np.eye(3) * float(D)
    if D.ndim == 1:
        return np.diag(D)
    return D.reshape(3, 3)


@dataclass
class QuadState:
    p_w: np.ndarray
    v_w: np.ndarray
    quat: np.ndarray
    omega_b: np.ndarray

    @property
    def R(self):
        return quat_to_rot(self.quat)

    def as_vector(self):
        return np.concatenate([self.p_w, self.v_w, self.quat, self.omega_b])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:10].copy(), x[10:13].copy())

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0)):
        return cls(np.array(position, dtype=float), np.array(velocity, dtype=float),
                   np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


@dataclass
class ControlInput:
    f_u: float
    tau_m: np.ndarray

    def as_vector(self):
        return np.array([self.f_u, *self.tau_m], dtype=float)

    @classmethod
    def from_vector(cls, u):
        return cls(float(u[0]), np.array(u[1:4], dtype=float))


@dataclass
class Wrench:
    f_e: np.ndarray
    tau_e: np.ndarray

    def as_vector(self):
        return np.concatenate([self.f_e, self.tau_e])

    @classmethod
    def from_vector(cls, chi):
        chi = np.asarray(chi, dtype=float)
        return cls(chi[0:3].copy(), chi[3:6].copy())


@dataclass
class PayloadState:
    """Payload relative to the attachment point: ``rel = p_payload - p_attach``
    (world frame) and its rate. ``q`` is the unit tether direction."""

    rel: np.ndarray
    rel_dot: np.ndarray
    taut: bool = True

    @property
    def q(self):
        return self.rel / np.linalg.norm(self.rel)

    @property
    def q_dot(self):
        n = np.linalg.norm(self.rel)
        q = self.rel / n
        return (self.rel_dot - q * (q @ self.rel_dot)) / n

    @classmethod
    def hanging(cls, l):
        return cls(np.array([0.0, 0.0, -l]), np.zeros(3), True)

    @classmethod
    def from_direction(cls, q, q_dot, l, taut=True):
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q)
        q_dot = np.asarray(q_dot, dtype=float)
        if taut:
            q_dot = q_dot - (q @ q_dot) * q  # keep the rate tangent to the sphere
        return cls(l * q, l * q_dot, taut)


def clamp_input(u, params: PlantParams):
    """Clip to actuator limits; returns (u, saturated)."""
    u = np.asarray(u, dtype=float)
    out = u.copy()
    out[0] = min(max(u[0], 0.0), params.f_max)
    out[1:4] = np.clip(u[1:4], -params.tau_max, params.tau_max)
    return out, bool(np.any(out != u))


def _pack(s: QuadState, ps: PayloadState | None):
    if ps is None:
        return np.concatenate([s.as_vector(), np.zeros(6)]), 0
    return np.concatenate([s.as_vector(), ps.rel, ps.rel_dot]), int(ps.taut)


def _check_finite(vec):
    if not np.all(np.isfinite(vec)):
        raise NumericalError("numerical blowup")


def true_external_wrench(s: QuadState, ps: PayloadState | None, u, params: PlantParams) -> Wrench:
    """Tether force T*q at the attachment point plus linear drag."""
    vec, taut = _pack(s, ps)
    _check_finite(vec)
    u = u.as_vector() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    wrench, _, _ = kernels.plant_eval(vec, taut, u, params.plant_vector())
    _check_finite(wrench)
    return Wrench.from_vector(wrench)


def step_plant(s: QuadState, ps: PayloadState | None, u, params: PlantParams, dt: float):
    """One RK4 step of length ``dt`` of the coupled quadrotor + payload ODE.

    Inputs are clamped to the actuator limits first.
    """
    if not 0.0 < dt <= 0.05:
        raise ConfigError("dt must lie in (0, 0.05]")
    u = u.as_vector() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    _check_finite(u)
    u, _ = clamp_input(u, params)
    vec, taut = _pack(s, ps)
    _check_finite(vec)
    out, taut, _ = kernels.plant_integrate(vec, taut, u, params.plant_vector(), dt, 1)
    _check_finite(out)
    new_ps = None if ps is None else PayloadState(out[13:16].copy(), out[16:19].copy(), bool(taut))
    return QuadState.from_vector(out[0:13]), new_ps


class Plant:
    """Stateful simulator with fixed internal substeps."""

    def __init__(self, params: PlantParams, quad: QuadState, payload: PayloadState | None = None):
        self.params = params
        if payload is None and params.m_p > 0:
            payload = PayloadState.hanging(params.l)
        self._pp = params.plant_vector()
        self.s, self.taut = _pack(quad, payload)
        self.t = 0.0
        self.saturated = False
        self.events = 0

    def set_params(self, params: PlantParams):
        if self.params.m_p == 0 and params.m_p > 0 and not self.taut:
            # attach a payload hanging at rest below the attachment point
            self.s[13:16] = [0.0, 0.0, -params.l]
            self.s[16:19] = 0.0
            self.taut = 1
        self.params = params
        self._pp = params.plant_vector()

    @property
    def x(self):
        return self.s[0:13].copy()

    @property
    def quad_state(self):
        return QuadState.from_vector(self.s[0:13])

    @property
    def payload_state(self):
        return PayloadState(self.s[13:16].copy(), self.s[16:19].copy(), bool(self.taut))

    @property
    def payload_position(self):
        R = quat_to_rot(self.s[6:10])
        return self.s[0:3] + R @ self.params.r_att + self.s[13:16]

    def evaluate(self, u):
        """(wrench, exact accelerations [v_dot, omega_dot], tension) at the current state."""
        u, _ = clamp_input(u, self.params)
        return kernels.plant_eval(self.s, self.taut, u, self._pp)

    def step(self, u, dt):
        u, sat = clamp_input(u, self.params)
        self.saturated = sat
        nsub = max(1, int(round(dt / self.params.substep)))
        out, self.taut, ev = kernels.plant_integrate(self.s, self.taut, u, self._pp, dt, nsub)
        _check_finite(out)
        self.s = out
        self.events |= ev
        self.t += dt
        return sat

    def kick_payload(self, dv):
        """Instantaneous payload velocity change (tangential part kept while taut)."""
        dd = self.s[16:19] + np.asarray(dv, dtype=float)
        if self.taut:
            q = self.s[13:16] / np.linalg.norm(self.s[13:16])
            dd = dd - (dd @ q) * q
        self.s[16:19] = dd


def mechanical_energy(s_vec, params: PlantParams):
    """Kinetic + potential energy of quadrotor and payload."""
    v = s_vec[3:6]
    om = s_vec[10:13]
    R = quat_to_rot(s_vec[6:10])
    e = 0.5 * params.m * v @ v + 0.5 * om @ params.J @ om + params.m * params.g * s_vec[2]
    if params.m_p > 0:
        pos = s_vec[0:3] + R @ params.r_att + s_vec[13:16]
        vel = v + R @ np.cross(om, params.r_att) + s_vec[16:19]
        e += 0.5 * params.m_p * vel @ vel + params.m_p * params.g * pos[2]
    return e


# ------------------------------------------------------------------ references


@dataclass
class RefParams:
    kind: str = "circle"
    radius: float = 1.0
    speed: float = 1.5
    height: float = 1.6
    center: tuple = (0.0, 0.0)
    lemniscate_size: float = 1.5
    hover_point: tuple = (0.0, 0.0, 2.0)
    n_points: int = 12
    segment_time: float = 2.5
    box: tuple = (1.5, 1.5, 0.5)
    seed: int = 0
    m: float = 2.0
    J: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.02, 0.04]))
    g: float = GRAVITY


REFERENCE_KINDS = ("circle", "lemniscate", "hover", "random_points")


class Reference:
    """Smooth position reference with differentially-flat state and inputs
    for the payload-free quadrotor (yaw held at zero)."""

    def __init__(self, params: RefParams):
        if params.kind not in REFERENCE_KINDS:
            raise ConfigError(f"unknown reference kind {params.kind!r}")
        self.params = params
        self._Jm = np.asarray(params.J, dtype=float)
        if params.kind == "random_points":
            rng = np.random.default_rng(params.seed)
            lo = np.array([-params.box[0], -params.box[1], params.height - params.box[2]])
            hi = np.array([params.box[0], params.box[1], params.height + params.box[2]])
            pts = rng.uniform(lo, hi, size=(params.n_points, 3))
            start = np.array([params.center[0], params.center[1], params.height])
            self._pts = np.vstack([start, pts])

    @property
    def period(self):
        p = self.params
        if p.kind == "circle":
            return 2.0 * math.pi * p.radius / p.speed
        if p.kind == "lemniscate":
            return 2.0 * math.pi / self._lem_rate()
        if p.kind == "random_points":
            return p.segment_time * (len(self._pts) - 1)
        return math.inf

    def _lem_rate(self):
        return self.params.speed / (math.sqrt(2.0) * self.params.lemniscate_size)

    def derivatives(self, t):
        """Position and its first four time derivatives, shape (5, 3)."""
        p = self.params
        out = np.zeros((5, 3))
        if p.kind == "hover":
            out[0] = p.hover_point
            return out
        if p.kind == "circle":
            w = p.speed / p.radius
            for k in range(5):
                c = math.cos(w * t + k * math.pi / 2.0)
                s = math.sin(w * t + k * math.pi / 2.0)
                out[k, 0] = p.radius * w**k * c
                out[k, 1] = p.radius * w**k * s
            out[0, 0] += p.center[0]
            out[0, 1] += p.center[1]
            out[0, 2] = p.height
            return out
        if p.kind == "lemniscate":
            a = p.lemniscate_size
            w = self._lem_rate()
            for k in range(5):
                out[k, 0] = a * w**k * math.sin(w * t + k * math.pi / 2.0)
                out[k, 1] = 0.5 * a * (2 * w) ** k * math.sin(2 * w * t + k * math.pi / 2.0)
            out[0, 0] += p.center[0]
            out[0, 1] += p.center[1]
            out[0, 2] = p.height
            return out
        # random_points: quintic rest-to-rest segments, then hold the last point
        T = p.segment_time
        nseg = len(self._pts) - 1
        i = min(int(t // T), nseg)
        if i >= nseg:
            out[0] = self._pts[-1]
            return out
        tau = (t - i * T) / T
        a, b = self._pts[i], self._pts[i + 1]
        # s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5 and derivatives
        s = [10 * tau**3 - 15 * tau**4 + 6 * tau**5,
             30 * tau**2 - 60 * tau**3 + 30 * tau**4,
             60 * tau - 180 * tau**2 + 120 * tau**3,
             60 - 360 * tau + 360 * tau**2,
             -360 + 720 * tau]
        out[0] = a + (b - a) * s[0]
        for k in range(1, 5):
            out[k] = (b - a) * s[k] / T**k
        return out

    def _attitude(self, t):
        d = self.derivatives(t)
        thrust = self.params.m * (d[2] + self.params.g * E3)
        zb = thrust / np.linalg.norm(thrust)
        yb = np.cross(zb, np.array([1.0, 0.0, 0.0]))
        yb /= np.linalg.norm(yb)
        xb = np.cross(yb, zb)
        return np.column_stack([xb, yb, zb]), float(np.linalg.norm(thrust))

    def _omega(self, t, h=1e-4):
        # five-point stencil on R(t); omega^x = R^T R_dot
        Rs = [self._attitude(t + k * h)[0] for k in (-2, -1, 1, 2)]
        Rdot = (Rs[0] - 8 * Rs[1] + 8 * Rs[2] - Rs[3]) / (12 * h)
        R = self._attitude(t)[0]
        W = R.T @ Rdot
        return vee(0.5 * (W - W.T))

    def state(self, t):
        d = self.derivatives(t)
        R, _ = self._attitude(t)
        if self.params.kind == "hover":
            om = np.zeros(3)
        else:
            om = self._omega(t)
        return np.concatenate([d[0], d[1], rot_to_quat(R), om])

    def input(self, t):
        _, f = self._attitude(t)
        if self.params.kind == "hover":
            return np.array([f, 0.0, 0.0, 0.0])
        h = 1e-4
        ws = [self._omega(t + k * h) for k in (-2, -1, 1, 2)]
        wdot = (ws[0] - 8 * ws[1] + 8 * ws[2] - ws[3]) / (12 * h)
        om = self._omega(t)
        tau = self._Jm @ wdot + np.cross(om, self._Jm @ om)
        return np.array([f, *tau])

    def horizon(self, t0, n, dt):
        """Stacked states (n+1, 13) and inputs (n, 4) on the grid t0 + i*dt."""
        xs = np.array([self.state(t0 + i * dt) for i in range(n + 1)])
        us = np.array([self.input(t0 + i * dt) for i in range(n)])
        return xs, us


def reference_trajectory(kind, params: RefParams | None = None, t: float = 0.0):
    """(x_ref, u_ref) at time ``t`` for a named reference."""
    if t < 0:
        raise ConfigError("t must be nonnegative")
    params = replace(params or RefParams(), kind=kind)
    ref = Reference(params)
    return QuadState.from_vector(ref.state(t)), ControlInput.from_vector(ref.input(t))


class CachedReference:
    """Grid-sampled reference; avoids recomputing the flat outputs each tick."""

    def __init__(self, ref: Reference, dt: float, duration: float, horizon: int):
        self.ref = ref
        self.dt = dt
        n = int(round(duration / dt)) + horizon + 2
        self.xs = np.array([ref.state(i * dt) for i in range(n + 1)])
        self.us = np.array([ref.input(i * dt) for i in range(n + 1)])

    def window(self, k, n):
        return self.xs[k:k + n + 1], self.us[k:k + n]


# ------------------------------------------------------------- closed loop


@dataclass
class LoopEvent:
    """A scheduled change to the plant during a closed-loop run."""

    t: float
    payload_mass: float | None = None
    payload_kick: tuple | None = None


def simulate_closed_loop(controller, params: PlantParams, ref: Reference, duration: float,
                         rate: float = 50.0, events=(), x0=None, payload=None,
                         bound: float = 10.0):
    """Fixed-rate closed-loop rollout.

    ``controller(k, t, x, ref_cache)`` returns the input for the tick and may
    expose ``last_diagnostics`` (a dict of per-tick values to log).
    The log row ``k`` holds x_k, u_k, the true wrench under u_k and exact
    accelerations. Divergence beyond ``bound`` metres from the reference
    truncates the log and sets ``failed``.
    """
    if rate < 10:
        raise ConfigError("rate must be at least 10 Hz")
    dt = 1.0 / rate
    n = int(round(duration * rate))
    horizon = getattr(controller, "horizon", 0)
    cache = CachedReference(ref, dt, duration, horizon)
    if x0 is None:
        x0 = cache.xs[0]
    plant = Plant(params, QuadState.from_vector(x0), payload)
    if hasattr(controller, "reset"):
        controller.reset()
    pending = sorted(events, key=lambda e: e.t)
    rows_x, rows_u, rows_w, rows_a, times, payload_pos = [], [], [], [], [], []
    diags = {}
    failed = False
    log_failure = ""
    for k in range(n):
        t = k * dt
        while pending and pending[0].t <= t + 1e-12:
            ev = pending.pop(0)
            if ev.payload_mass is not None:
                plant.set_params(replace(plant.params, m_p=ev.payload_mass))
            if ev.payload_kick is not None:
                plant.kick_payload(ev.payload_kick)
        x = plant.x
        if np.linalg.norm(x[0:3] - cache.xs[k, 0:3]) > bound:
            failed = True
            break
        try:
            u = np.asarray(controller(k, t, x, cache), dtype=float)
        except NumericalError as exc:
            log_failure = str(exc)
            failed = True
            break
        u, _ = clamp_input(u, plant.params)
        wrench, acc, _ = plant.evaluate(u)
        rows_x.append(x)
        rows_u.append(u)
        rows_w.append(wrench)
        rows_a.append(acc)
        times.append(t)
        payload_pos.append(plant.payload_position)
        for key, val in (getattr(controller, "last_diagnostics", None) or {}).items():
            diags.setdefault(key, []).append(val)
        try:
            plant.step(u, dt)
        except NumericalError:
            failed = True
            break
    if not times:
        log = TrajectoryLog.empty()
        log.failed = failed
        log.meta["failure"] = log_failure
        return log
    extras = {}
    for key, vals in diags.items():
        arr = np.array(vals, dtype=object if key == "status" else float)
        extras[key] = arr
    log = TrajectoryLog.from_rows(rows_x, rows_u, times, wrenches=rows_w, acc=rows_a,
                                  extras=extras, failed=failed)
    log.meta["payload_position"] = np.array(payload_pos)
    log.meta["reference"] = cache.xs[:len(times)]
    log.meta["dt"] = dt
    log.meta["failure"] = log_failure
    return log


def collect_dataset(controller, kind, duration, rate, params: PlantParams,
                    ref_params: RefParams | None = None, **kw) -> TrajectoryLog:
    """Closed-loop rollout of ``controller`` on a named reference."""
    ref_params = replace(ref_params or RefParams(m=params.m, J=params.J, g=params.g), kind=kind)
    if duration <= 0:
        return TrajectoryLog.empty()
    return simulate_closed_loop(controller, params, Reference(ref_params), duration, rate, **kw)
