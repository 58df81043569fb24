"""Pure NumPy implementations of the numerical kernels.

Mirrors ``_kernels.pyx`` function by function. Used when the compiled
extension is unavailable, and as the reference in the backend tests.

State layouts
-------------
quadrotor ``x`` (13): p_w(3), v_w(3), q(4, w-first, body->world), omega_b(3)
plant ``s`` (19): x(13), d(3), d_dot(3) where d = payload - attachment (world)
wrench ``w`` (6): f_e (world), tau_e (body)
quad params ``qp`` (20): m, g, J (row-major 9), J^-1 (row-major 9)
plant params ``pp`` (31): qp(20), m_p, l, r_att(3), diag(D_v)(3), diag(D_omega)(3)
"""
import math

import numpy as np

QP_LEN = 20
PP_LEN = 31
NX = 13
NDX = 12
NU = 4
NS = 19

EVENT_SLACK = 1
EVENT_TAUT = 2


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _quat_exp(dtheta):
    th = math.sqrt(dtheta[0] ** 2 + dtheta[1] ** 2 + dtheta[2] ** 2)
    if th < 1e-12:
        return np.array([1.0, 0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2]])
    s = math.sin(0.5 * th) / th
    return np.array([math.cos(0.5 * th), s * dtheta[0], s * dtheta[1], s * dtheta[2]])


def _quat_log(q):
    w = q[0]
    v = q[1:4]
    if w < 0.0:
        w = -w
        v = -v
    n = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    if n < 1e-12:
        return 2.0 * v / w
    return 2.0 * math.atan2(n, w) / n * v


def _quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _unpack_qp(qp):
    return qp[0], qp[1], qp[2:11].reshape(3, 3), qp[11:20].reshape(3, 3)


def quad_deriv(x, u, w, qp):
    m, g, J, Jinv = _unpack_qp(qp)
    q = x[6:10]
    om = x[10:13]
    R = _quat_to_rot(q)
    dx = np.empty(13)
    dx[0:3] = x[3:6]
    acc = R[:, 2] * u[0] + w[0:3]
    acc[2] -= m * g
    dx[3:6] = acc / m
    dx[6:10] = 0.5 * _quat_mul(q, np.array([0.0, om[0], om[1], om[2]]))
    dx[10:13] = Jinv @ (-np.cross(om, J @ om) + u[1:4] + w[3:6])
    return dx


def _normalize_quat(x):
    q = x[6:10]
    x[6:10] = q / math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)


def _quad_rk4(x, u, w, qp, h):
    k1 = quad_deriv(x, u, w, qp)
    k2 = quad_deriv(x + 0.5 * h * k1, u, w, qp)
    k3 = quad_deriv(x + 0.5 * h * k2, u, w, qp)
    k4 = quad_deriv(x + h * k3, u, w, qp)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _normalize_quat(out)
    return out


def quad_integrate(x, u, w, qp, dt, nsub):
    x = np.array(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    qp = np.asarray(qp, dtype=float)
    h = dt / nsub
    for _ in range(nsub):
        x = _quad_rk4(x, u, w, qp, h)
    return x


def quad_rollout(x0, us, ws, qp, dt, nsub):
    us = np.asarray(us, dtype=float)
    ws = np.asarray(ws, dtype=float)
    n = us.shape[0]
    xs = np.empty((n + 1, 13))
    xs[0] = x0
    for i in range(n):
        xs[i + 1] = quad_integrate(xs[i], us[i], ws[i], qp, dt, nsub)
    return xs


def _retract(x, dx):
    out = np.array(x, dtype=float)
    out[0:6] += dx[0:6]
    out[6:10] = _quat_mul(x[6:10], _quat_exp(dx[6:9]))
    out[10:13] += dx[9:12]
    return out


def _local(xa, xb):
    """Tangent coordinates of xb relative to xa."""
    d = np.empty(12)
    d[0:6] = xb[0:6] - xa[0:6]
    d[6:9] = _quat_log(_quat_mul(_quat_conj(xa[6:10]), xb[6:10]))
    d[9:12] = xb[10:13] - xa[10:13]
    return d


def quad_linearize(xs, us, ws, qp, dt, nsub, eps):
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    ws = np.asarray(ws, dtype=float)
    qp = np.asarray(qp, dtype=float)
    n = us.shape[0]
    Ad = np.empty((n, 12, 12))
    Bd = np.empty((n, 12, 4))
    e = np.zeros(12)
    for i in range(n):
        fbar = quad_integrate(xs[i], us[i], ws[i], qp, dt, nsub)
        for j in range(12):
            e[:] = 0.0
            e[j] = eps
            fp = quad_integrate(_retract(xs[i], e), us[i], ws[i], qp, dt, nsub)
            e[j] = -eps
            fm = quad_integrate(_retract(xs[i], e), us[i], ws[i], qp, dt, nsub)
            Ad[i, :, j] = (_local(fbar, fp) - _local(fbar, fm)) / (2.0 * eps)
        for j in range(4):
            up = np.array(us[i])
            up[j] += eps
            fp = quad_integrate(xs[i], up, ws[i], qp, dt, nsub)
            up[j] -= 2.0 * eps
            fm = quad_integrate(xs[i], up, ws[i], qp, dt, nsub)
            Bd[i, :, j] = (_local(fbar, fp) - _local(fbar, fm)) / (2.0 * eps)
    return Ad, Bd


# ---------------------------------------------------------------- plant


def _plant_terms(s, taut, u, pp):
    """Return (wrench6, xdot19, tension)."""
    m, g, J, Jinv = _unpack_qp(pp)
    mp = pp[20]
    r = pp[22:25]
    Dv = pp[25:28]
    Dw = pp[28:31]
    v = s[3:6]
    om = s[10:13]
    R = _quat_to_rot(s[6:10])
    f_res = -Dv * v
    t_res = -Dw * om
    d = s[13:16]
    dd = s[16:19]
    tension = 0.0
    f_p = np.zeros(3)
    t_p = np.zeros(3)
    loaded = mp > 0.0 and taut
    if loaded:
        L = math.sqrt(d @ d)
        qv = d / L
        vdot0 = R[:, 2] * u[0] + f_res
        vdot0[2] -= m * g
        vdot0 /= m
        wdot0 = Jinv @ (-np.cross(om, J @ om) + u[1:4] + t_res)
        acc0 = vdot0 + R @ (np.cross(wdot0, r) + np.cross(om, np.cross(om, r)))
        qb = R.T @ qv
        cb = np.cross(r, qb)
        coef = 1.0 / mp + 1.0 / m + cb @ (Jinv @ cb)
        rhs = -g * qv[2] - qv @ acc0 + (dd @ dd) / L
        tension = rhs / coef
        f_p = tension * qv
        t_p = tension * cb
    wrench = np.concatenate([f_p + f_res, t_p + t_res])
    xdot = np.empty(19)
    xdot[0:13] = quad_deriv(s[0:13], u, wrench, pp[0:20])
    if mp > 0.0:
        acc = xdot[3:6] + R @ (np.cross(xdot[10:13], r) + np.cross(om, np.cross(om, r)))
        pl_acc = np.array([0.0, 0.0, -g])
        if loaded:
            pl_acc = pl_acc - (tension / mp) * (d / math.sqrt(d @ d))
        xdot[13:16] = dd
        xdot[16:19] = pl_acc - acc
    else:
        xdot[13:19] = 0.0
    return wrench, xdot, tension


def _plant_rk4(s, taut, u, pp, h):
    k1 = _plant_terms(s, taut, u, pp)[1]
    k2 = _plant_terms(s + 0.5 * h * k1, taut, u, pp)[1]
    k3 = _plant_terms(s + 0.5 * h * k2, taut, u, pp)[1]
    k4 = _plant_terms(s + h * k3, taut, u, pp)[1]
    out = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _normalize_quat(out)
    return out


def _project_taut(s, l):
    d = s[13:16]
    n = math.sqrt(d @ d)
    qv = d / n
    s[13:16] = l * qv
    dd = s[16:19]
    s[16:19] = dd - (dd @ qv) * qv


def _substep(s, taut, u, pp, h):
    """One hybrid substep; returns (state, taut, events)."""
    mp = pp[20]
    l = pp[21]
    events = 0
    if mp <= 0.0:
        return _plant_rk4(s, 0, u, pp, h), 0, 0
    if taut:
        if _plant_terms(s, 1, u, pp)[2] < 0.0:
            taut = 0
            events |= EVENT_SLACK
    if taut:
        out = _plant_rk4(s, 1, u, pp, h)
        _project_taut(out, l)
        return out, 1, events
    out = _plant_rk4(s, 0, u, pp, h)
    d = out[13:16]
    if math.sqrt(d @ d) < l:
        return out, 0, events
    # locate the re-engagement instant by bisection on the substep length
    lo, hi = 0.0, h
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        trial = _plant_rk4(s, 0, u, pp, mid)
        dm = trial[13:16]
        if math.sqrt(dm @ dm) < l:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    out = _plant_rk4(s, 0, u, pp, hi) if hi > 0.0 else np.array(s)
    # inelastic impact: keep only the tangential relative velocity
    _project_taut(out, l)
    events |= EVENT_TAUT
    rest = h - hi
    if rest > 0.0:
        out = _plant_rk4(out, 1, u, pp, rest)
        _project_taut(out, l)
    return out, 1, events


def plant_integrate(s, taut, u, pp, dt, nsub):
    s = np.array(s, dtype=float)
    u = np.asarray(u, dtype=float)
    pp = np.asarray(pp, dtype=float)
    taut = int(taut)
    h = dt / nsub
    events = 0
    for _ in range(nsub):
        s, taut, ev = _substep(s, taut, u, pp, h)
        events |= ev
    return s, taut, events


def plant_eval(s, taut, u, pp):
    s = np.asarray(s, dtype=float)
    wrench, xdot, tension = _plant_terms(s, int(taut), np.asarray(u, dtype=float),
                                         np.asarray(pp, dtype=float))
    acc = np.concatenate([xdot[3:6], xdot[10:13]])
    return wrench, acc, float(tension)
