"""Training labels by inverting the rigid-body equations, and log ingestion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, SchemaError
from .rotations import quat_to_rot
from .sim import PlantParams, Wrench
from .trajlog import (LABEL_COLUMNS, TrajectoryLog, bad_rows, parse_log_columns,
                      read_columns_csv, write_columns_csv)


@dataclass
class LabeledSet:
    """Wrench labels ``chi`` (n, 6) with regressor inputs ``zeta`` = [v_w; omega_b]."""

    t: np.ndarray
    chi: np.ndarray
    zeta: np.ndarray

    def __len__(self):
        return len(self.t)

    def to_csv(self, path_or_buf):
        cols = {"t": self.t}
        for i, name in enumerate(LABEL_COLUMNS[1:7]):
            cols[name] = self.chi[:, i]
        for i, name in enumerate(LABEL_COLUMNS[7:]):
            cols[name] = self.zeta[:, i]
        write_columns_csv(path_or_buf, cols)

    @classmethod
    def from_csv(cls, path_or_buf):
        header, cols, n = read_columns_csv(path_or_buf)
        for name in LABEL_COLUMNS:
            if name not in cols:
                raise SchemaError(f"missing column {name}")
        chi = np.column_stack([cols[c] for c in LABEL_COLUMNS[1:7]]) if n else np.zeros((0, 6))
        zeta = np.column_stack([cols[c] for c in LABEL_COLUMNS[7:]]) if n else np.zeros((0, 6))
        return cls(cols["t"], chi, zeta)

    @classmethod
    def concatenate(cls, sets):
        sets = list(sets)
        return cls(np.concatenate([s.t for s in sets]), np.vstack([s.chi for s in sets]),
                   np.vstack([s.zeta for s in sets]))


def _check_uniform(t, tol=0.01):
    dts = np.diff(t)
    dt = float(np.median(dts))
    if dt <= 0 or np.max(np.abs(dts - dt)) > tol * dt:
        raise NumericalError("non-uniform timestamps")
    return dt


def numeric_derivatives(log: TrajectoryLog):
    """(v_dot, omega_dot) by central differences, second-order one-sided at the ends."""
    if len(log) < 3:
        raise SchemaError("need at least 3 samples")
    dt = _check_uniform(log.t)
    v_dot = np.gradient(log.v, dt, axis=0, edge_order=2)
    w_dot = np.gradient(log.omega, dt, axis=0, edge_order=2)
    return v_dot, w_dot


def label_arrays(q, omega, v_dot, omega_dot, u, params: PlantParams):
    """Vectorized inversion: f_e = m v_dot + m g z - R f_u z,
    tau_e = J omega_dot + omega x J omega - tau_m."""
    q = np.atleast_2d(q)
    omega = np.atleast_2d(omega)
    v_dot = np.atleast_2d(v_dot)
    omega_dot = np.atleast_2d(omega_dot)
    u = np.atleast_2d(u)
    w, x, y, z = q.T
    # third column of R(q)
    zb = np.column_stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)])
    f = params.m * v_dot - zb * u[:, 0:1]
    f[:, 2] += params.m * params.g
    Jw = omega @ params.J.T
    tau = omega_dot @ params.J.T + np.cross(omega, Jw) - u[:, 1:4]
    out = np.hstack([f, tau])
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite label")
    return out


def label_wrench(s, v_dot, omega_dot, u, params: PlantParams) -> Wrench:
    """Single-sample label from a QuadState and its accelerations."""
    u = u.as_vector() if hasattr(u, "as_vector") else np.asarray(u, dtype=float)
    R = quat_to_rot(s.quat)
    f = params.m * np.asarray(v_dot) + params.m * params.g * np.array([0.0, 0.0, 1.0]) - R[:, 2] * u[0]
    om = np.asarray(s.omega_b)
    tau = params.J @ np.asarray(omega_dot) + np.cross(om, params.J @ om) - u[1:4]
    chi = np.concatenate([f, tau])
    if not np.all(np.isfinite(chi)):
        raise NumericalError("non-finite label")
    return Wrench.from_vector(chi)


def stencil_inputs(u):
    """Inputs matching a central-difference stencil under zero-order hold.

    (v[k+1] - v[k-1]) / 2dt averages the accelerations produced by u[k-1]
    and u[k]; the label uses their mean. End rows keep their own input.
    """
    u = np.asarray(u, dtype=float)
    out = u.copy()
    if len(u) >= 3:
        out[1:-1] = 0.5 * (u[:-2] + u[1:-1])
    return out


def label_log(log: TrajectoryLog, params: PlantParams, derivatives="auto",
              zoh_inputs=True) -> LabeledSet:
    """Labels for every row of a log.

    ``derivatives``: ``"exact"`` uses simulator accelerations, ``"central"``
    finite differences, ``"auto"`` picks exact when available.
    ``params`` are the nominal quadrotor parameters (payload unknown).
    """
    if derivatives == "auto":
        derivatives = "exact" if log.acc is not None else "central"
    if derivatives == "exact":
        if log.acc is None:
            raise SchemaError("log carries no exact accelerations")
        v_dot, w_dot = log.acc[:, 0:3], log.acc[:, 3:6]
        u = log.u
    elif derivatives == "central":
        v_dot, w_dot = numeric_derivatives(log)
        u = stencil_inputs(log.u) if zoh_inputs else log.u
    else:
        raise ValueError(f"unknown derivative source {derivatives!r}")
    chi = label_arrays(log.q, log.omega, v_dot, w_dot, u, params)
    return LabeledSet(log.t.copy(), chi, log.zeta)


class OnlineLabeler:
    """Streaming labels for the control loop.

    After observing x_k the label for tick k-1 is available from the central
    difference of v over [k-2, k] and the stencil-averaged input.
    """

    def __init__(self, params: PlantParams, dt: float):
        self.params = params
        self.dt = dt
        self.reset()

    def reset(self):
        self._x = []
        self._u = []

    def push(self, x, u_prev=None):
        """Record state x_k and the input applied over [k-1, k].

        Returns (chi_{k-1}, zeta_{k-1}) or None while history is short.
        """
        if u_prev is not None:
            self._u.append(np.asarray(u_prev, dtype=float))
        self._x.append(np.asarray(x, dtype=float))
        self._x = self._x[-3:]
        self._u = self._u[-2:]
        if len(self._x) < 3 or len(self._u) < 2:
            return None
        x0, x1, x2 = self._x
        v_dot = (x2[3:6] - x0[3:6]) / (2 * self.dt)
        w_dot = (x2[10:13] - x0[10:13]) / (2 * self.dt)
        u = 0.5 * (self._u[0] + self._u[1])
        chi = label_arrays(x1[6:10], x1[10:13], v_dot, w_dot, u, self.params)[0]
        zeta = np.concatenate([x1[3:6], x1[10:13]])
        return chi, zeta


def ingest_flight_log(stream) -> TrajectoryLog:
    """Parse and validate an external CSV log.

    Rows with non-finite values are dropped and their indices recorded in
    ``meta["rejected_rows"]``; quaternions are renormalized when their norm
    deviates from one.
    """
    header, cols, n = read_columns_csv(stream)
    log = parse_log_columns(header, cols, n)
    bad = bad_rows(log)
    if len(bad):
        warnings.warn(f"rejected rows with NaN: {bad.tolist()}")
        keep = np.setdiff1d(np.arange(len(log)), bad)
        log = _take(log, keep)
    log.meta["rejected_rows"] = bad.tolist()
    if len(log) < 3:
        raise SchemaError("log needs at least 3 valid rows")
    norms = np.linalg.norm(log.q, axis=1)
    off = np.abs(norms - 1.0) > 1e-12
    if np.any(off):
        log.q = log.q.copy()
        log.q[off] = log.q[off] / norms[off, None]
    return log


def _take(log, idx):
    return TrajectoryLog(
        t=log.t[idx], p=log.p[idx], v=log.v[idx], q=log.q[idx], omega=log.omega[idx],
        u=log.u[idx], wrench=None if log.wrench is None else log.wrench[idx],
        extras={k: v[idx] for k, v in log.extras.items()}, failed=log.failed,
    )
