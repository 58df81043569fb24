# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: quadrotor and tethered-payload RK4, horizon rollouts and
finite-difference Jacobians. Layouts are documented in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, atan2

cnp.import_array()

QP_LEN = 20
PP_LEN = 31
NX = 13
NDX = 12
NU = 4
NS = 19

EVENT_SLACK = 1
EVENT_TAUT = 2


cdef inline void quat_mul(const double* a, const double* b, double* o) noexcept nogil:
    o[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    o[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    o[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    o[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]


cdef inline void quat_to_rot(const double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z)
    R[1] = 2 * (x * y - w * z)
    R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z)
    R[4] = 1 - 2 * (x * x + z * z)
    R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y)
    R[7] = 2 * (y * z + w * x)
    R[8] = 1 - 2 * (x * x + y * y)


cdef inline void quat_exp(const double* d, double* q) noexcept nogil:
    cdef double th = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    cdef double s
    if th < 1e-12:
        q[0] = 1.0
        q[1] = 0.5 * d[0]
        q[2] = 0.5 * d[1]
        q[3] = 0.5 * d[2]
        return
    s = sin(0.5 * th) / th
    q[0] = cos(0.5 * th)
    q[1] = s * d[0]
    q[2] = s * d[1]
    q[3] = s * d[2]


cdef inline void quat_log(const double* q, double* o) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    cdef double n, f
    if w < 0.0:
        w = -w
        x = -x
        y = -y
        z = -z
    n = sqrt(x * x + y * y + z * z)
    if n < 1e-12:
        f = 2.0 / w
    else:
        f = 2.0 * atan2(n, w) / n
    o[0] = f * x
    o[1] = f * y
    o[2] = f * z


cdef inline void cross(const double* a, const double* b, double* o) noexcept nogil:
    o[0] = a[1] * b[2] - a[2] * b[1]
    o[1] = a[2] * b[0] - a[0] * b[2]
    o[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void matvec(const double* M, const double* v, double* o) noexcept nogil:
    o[0] = M[0] * v[0] + M[1] * v[1] + M[2] * v[2]
    o[1] = M[3] * v[0] + M[4] * v[1] + M[5] * v[2]
    o[2] = M[6] * v[0] + M[7] * v[1] + M[8] * v[2]


cdef inline void matTvec(const double* M, const double* v, double* o) noexcept nogil:
    o[0] = M[0] * v[0] + M[3] * v[1] + M[6] * v[2]
    o[1] = M[1] * v[0] + M[4] * v[1] + M[7] * v[2]
    o[2] = M[2] * v[0] + M[5] * v[1] + M[8] * v[2]


cdef inline double dot3(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef void quad_deriv_c(const double* x, const double* u, const double* w,
                       const double* qp, double* dx) noexcept nogil:
    cdef double m = qp[0], g = qp[1]
    cdef const double* J = qp + 2
    cdef const double* Jinv = qp + 11
    cdef double R[9]
    cdef double om4[4]
    cdef double Jw[3]
    cdef double c[3]
    cdef double t[3]
    cdef int k
    quat_to_rot(x + 6, R)
    dx[0] = x[3]
    dx[1] = x[4]
    dx[2] = x[5]
    dx[3] = (R[2] * u[0] + w[0]) / m
    dx[4] = (R[5] * u[0] + w[1]) / m
    dx[5] = (R[8] * u[0] + w[2] - m * g) / m
    om4[0] = 0.0
    om4[1] = x[10]
    om4[2] = x[11]
    om4[3] = x[12]
    quat_mul(x + 6, om4, dx + 6)
    for k in range(4):
        dx[6 + k] *= 0.5
    matvec(J, x + 10, Jw)
    cross(x + 10, Jw, c)
    for k in range(3):
        t[k] = -c[k] + u[1 + k] + w[3 + k]
    matvec(Jinv, t, dx + 10)


cdef inline void normalize_quat(double* x) noexcept nogil:
    cdef double n = sqrt(x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9])
    x[6] /= n
    x[7] /= n
    x[8] /= n
    x[9] /= n


cdef void quad_rk4_c(const double* x, const double* u, const double* w,
                     const double* qp, double h, double* out) noexcept nogil:
    cdef double k1[13]
    cdef double k2[13]
    cdef double k3[13]
    cdef double k4[13]
    cdef double tmp[13]
    cdef int i
    quad_deriv_c(x, u, w, qp, k1)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    quad_deriv_c(tmp, u, w, qp, k2)
    for i in range(13):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    quad_deriv_c(tmp, u, w, qp, k3)
    for i in range(13):
        tmp[i] = x[i] + h * k3[i]
    quad_deriv_c(tmp, u, w, qp, k4)
    for i in range(13):
        out[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    normalize_quat(out)


cdef void quad_integrate_c(const double* x, const double* u, const double* w,
                           const double* qp, double dt, int nsub, double* out) noexcept nogil:
    cdef double buf[13]
    cdef double h = dt / nsub
    cdef int i, k
    for k in range(13):
        buf[k] = x[k]
    for i in range(nsub):
        quad_rk4_c(buf, u, w, qp, h, out)
        for k in range(13):
            buf[k] = out[k]


cdef void retract_c(const double* x, const double* d, double* o) noexcept nogil:
    cdef double e[4]
    cdef int k
    for k in range(6):
        o[k] = x[k] + d[k]
    quat_exp(d + 6, e)
    quat_mul(x + 6, e, o + 6)
    for k in range(3):
        o[10 + k] = x[10 + k] + d[9 + k]


cdef void local_c(const double* xa, const double* xb, double* d) noexcept nogil:
    cdef double qc[4]
    cdef double r[4]
    cdef int k
    for k in range(6):
        d[k] = xb[k] - xa[k]
    qc[0] = xa[6]
    qc[1] = -xa[7]
    qc[2] = -xa[8]
    qc[3] = -xa[9]
    quat_mul(qc, xb + 6, r)
    quat_log(r, d + 6)
    for k in range(3):
        d[9 + k] = xb[10 + k] - xa[10 + k]


def quad_integrate(x, u, w, qp, double dt, int nsub):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(qp, dtype=np.float64)
    out = np.empty(13)
    cdef double[::1] ov = out
    quad_integrate_c(&xv[0], &uv[0], &wv[0], &pv[0], dt, nsub, &ov[0])
    return out


def quad_rollout(x0, us, ws, qp, double dt, int nsub):
    cdef double[::1] xv = np.ascontiguousarray(x0, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(us, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(ws, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(qp, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0]
    xs = np.empty((n + 1, 13))
    cdef double[:, ::1] xo = xs
    cdef Py_ssize_t i
    cdef int k
    for k in range(13):
        xo[0, k] = xv[k]
    with nogil:
        for i in range(n):
            quad_integrate_c(&xo[i, 0], &uv[i, 0], &wv[i, 0], &pv[0], dt, nsub, &xo[i + 1, 0])
    return xs


def quad_linearize(xs, us, ws, qp, double dt, int nsub, double eps):
    cdef double[:, ::1] xv = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(us, dtype=np.float64)
    cdef double[:, ::1] wv = np.ascontiguousarray(ws, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(qp, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0]
    Ad_arr = np.empty((n, 12, 12))
    Bd_arr = np.empty((n, 12, 4))
    cdef double[:, :, ::1] Ad = Ad_arr
    cdef double[:, :, ::1] Bd = Bd_arr
    cdef double fbar[13]
    cdef double xp[13]
    cdef double fp[13]
    cdef double fm[13]
    cdef double e[12]
    cdef double dp[12]
    cdef double dm[12]
    cdef double up[4]
    cdef Py_ssize_t i
    cdef int j, k
    with nogil:
        for i in range(n):
            quad_integrate_c(&xv[i, 0], &uv[i, 0], &wv[i, 0], &pv[0], dt, nsub, fbar)
            for j in range(12):
                for k in range(12):
                    e[k] = 0.0
                e[j] = eps
                retract_c(&xv[i, 0], e, xp)
                quad_integrate_c(xp, &uv[i, 0], &wv[i, 0], &pv[0], dt, nsub, fp)
                e[j] = -eps
                retract_c(&xv[i, 0], e, xp)
                quad_integrate_c(xp, &uv[i, 0], &wv[i, 0], &pv[0], dt, nsub, fm)
                local_c(fbar, fp, dp)
                local_c(fbar, fm, dm)
                for k in range(12):
                    Ad[i, k, j] = (dp[k] - dm[k]) / (2.0 * eps)
            for j in range(4):
                for k in range(4):
                    up[k] = uv[i, k]
                up[j] += eps
                quad_integrate_c(&xv[i, 0], up, &wv[i, 0], &pv[0], dt, nsub, fp)
                up[j] -= 2.0 * eps
                quad_integrate_c(&xv[i, 0], up, &wv[i, 0], &pv[0], dt, nsub, fm)
                local_c(fbar, fp, dp)
                local_c(fbar, fm, dm)
                for k in range(12):
                    Bd[i, k, j] = (dp[k] - dm[k]) / (2.0 * eps)
    return Ad_arr, Bd_arr


# ---------------------------------------------------------------- plant


cdef double plant_terms_c(const double* s, int taut, const double* u, const double* pp,
                          double* wrench, double* xdot) noexcept nogil:
    """Fill wrench(6) and xdot(19); return tether tension."""
    cdef double m = pp[0], g = pp[1]
    cdef const double* J = pp + 2
    cdef const double* Jinv = pp + 11
    cdef double mp = pp[20]
    cdef const double* r = pp + 22
    cdef const double* Dv = pp + 25
    cdef const double* Dw = pp + 28
    cdef const double* om = s + 10
    cdef const double* d = s + 13
    cdef const double* dd = s + 16
    cdef double R[9]
    cdef double f_res[3]
    cdef double t_res[3]
    cdef double vdot0[3]
    cdef double wdot0[3]
    cdef double Jw[3]
    cdef double c[3]
    cdef double t[3]
    cdef double a1[3]
    cdef double a2[3]
    cdef double a3[3]
    cdef double acc0[3]
    cdef double qv[3]
    cdef double qb[3]
    cdef double cb[3]
    cdef double jc[3]
    cdef double L, coef, rhs
    cdef double tension = 0.0
    cdef int k
    cdef bint loaded = mp > 0.0 and taut != 0
    quat_to_rot(s + 6, R)
    for k in range(3):
        f_res[k] = -Dv[k] * s[3 + k]
        t_res[k] = -Dw[k] * om[k]
        wrench[k] = f_res[k]
        wrench[3 + k] = t_res[k]
    if loaded:
        L = sqrt(dot3(d, d))
        for k in range(3):
            qv[k] = d[k] / L
            vdot0[k] = R[3 * k + 2] * u[0] + f_res[k]
        vdot0[2] -= m * g
        for k in range(3):
            vdot0[k] /= m
        matvec(J, om, Jw)
        cross(om, Jw, c)
        for k in range(3):
            t[k] = -c[k] + u[1 + k] + t_res[k]
        matvec(Jinv, t, wdot0)
        cross(wdot0, r, a1)
        cross(om, r, a2)
        cross(om, a2, a3)
        for k in range(3):
            a1[k] += a3[k]
        matvec(R, a1, acc0)
        for k in range(3):
            acc0[k] += vdot0[k]
        matTvec(R, qv, qb)
        cross(r, qb, cb)
        matvec(Jinv, cb, jc)
        coef = 1.0 / mp + 1.0 / m + dot3(cb, jc)
        rhs = -g * qv[2] - dot3(qv, acc0) + dot3(dd, dd) / L
        tension = rhs / coef
        for k in range(3):
            wrench[k] += tension * qv[k]
            wrench[3 + k] += tension * cb[k]
    quad_deriv_c(s, u, wrench, pp, xdot)
    if mp > 0.0:
        cross(xdot + 10, r, a1)
        cross(om, r, a2)
        cross(om, a2, a3)
        for k in range(3):
            a1[k] += a3[k]
        matvec(R, a1, acc0)
        for k in range(3):
            xdot[13 + k] = dd[k]
            xdot[16 + k] = -(xdot[3 + k] + acc0[k])
        xdot[18] -= g
        if loaded:
            for k in range(3):
                xdot[16 + k] -= (tension / mp) * qv[k]
    else:
        for k in range(6):
            xdot[13 + k] = 0.0
    return tension


cdef void plant_rk4_c(const double* s, int taut, const double* u, const double* pp,
                      double h, double* out) noexcept nogil:
    cdef double k1[19]
    cdef double k2[19]
    cdef double k3[19]
    cdef double k4[19]
    cdef double tmp[19]
    cdef double wr[6]
    cdef int i
    plant_terms_c(s, taut, u, pp, wr, k1)
    for i in range(19):
        tmp[i] = s[i] + 0.5 * h * k1[i]
    plant_terms_c(tmp, taut, u, pp, wr, k2)
    for i in range(19):
        tmp[i] = s[i] + 0.5 * h * k2[i]
    plant_terms_c(tmp, taut, u, pp, wr, k3)
    for i in range(19):
        tmp[i] = s[i] + h * k3[i]
    plant_terms_c(tmp, taut, u, pp, wr, k4)
    for i in range(19):
        out[i] = s[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    normalize_quat(out)


cdef void project_taut_c(double* s, double l) noexcept nogil:
    cdef double n = sqrt(dot3(s + 13, s + 13))
    cdef double qv[3]
    cdef double vr
    cdef int k
    for k in range(3):
        qv[k] = s[13 + k] / n
        s[13 + k] = l * qv[k]
    vr = dot3(s + 16, qv)
    for k in range(3):
        s[16 + k] -= vr * qv[k]


cdef int substep_c(double* s, int* taut, const double* u, const double* pp,
                   double h) noexcept nogil:
    cdef double mp = pp[20], l = pp[21]
    cdef double out[19]
    cdef double trial[19]
    cdef double xd[19]
    cdef double wr[6]
    cdef double lo, hi, mid, rest
    cdef int events = 0
    cdef int k, it
    if mp <= 0.0:
        plant_rk4_c(s, 0, u, pp, h, out)
        for k in range(19):
            s[k] = out[k]
        taut[0] = 0
        return 0
    if taut[0]:
        if plant_terms_c(s, 1, u, pp, wr, xd) < 0.0:
            taut[0] = 0
            events |= 1
    if taut[0]:
        plant_rk4_c(s, 1, u, pp, h, out)
        project_taut_c(out, l)
        for k in range(19):
            s[k] = out[k]
        return events
    plant_rk4_c(s, 0, u, pp, h, out)
    if sqrt(dot3(out + 13, out + 13)) < l:
        for k in range(19):
            s[k] = out[k]
        return events
    lo = 0.0
    hi = h
    for it in range(60):
        mid = 0.5 * (lo + hi)
        plant_rk4_c(s, 0, u, pp, mid, trial)
        if sqrt(dot3(trial + 13, trial + 13)) < l:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    if hi > 0.0:
        plant_rk4_c(s, 0, u, pp, hi, out)
    else:
        for k in range(19):
            out[k] = s[k]
    project_taut_c(out, l)
    events |= 2
    rest = h - hi
    if rest > 0.0:
        plant_rk4_c(out, 1, u, pp, rest, trial)
        project_taut_c(trial, l)
        for k in range(19):
            out[k] = trial[k]
    for k in range(19):
        s[k] = out[k]
    taut[0] = 1
    return events


def plant_integrate(s, int taut, u, pp, double dt, int nsub):
    out = np.array(s, dtype=np.float64, copy=True, order="C")
    cdef double[::1] sv = out
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(pp, dtype=np.float64)
    cdef double h = dt / nsub
    cdef int events = 0
    cdef int tt = taut
    cdef int i
    with nogil:
        for i in range(nsub):
            events |= substep_c(&sv[0], &tt, &uv[0], &pv[0], h)
    return out, tt, events


def plant_eval(s, int taut, u, pp):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(pp, dtype=np.float64)
    wrench = np.empty(6)
    cdef double[::1] wv = wrench
    cdef double xd[19]
    cdef double tension = plant_terms_c(&sv[0], taut, &uv[0], &pv[0], &wv[0], xd)
    acc = np.array([xd[3], xd[4], xd[5], xd[10], xd[11], xd[12]])
    return wrench, acc, tension
