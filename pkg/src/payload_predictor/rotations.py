"""Quaternion helpers (w-first, Hamilton convention, body -> world)."""
import numpy as np


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Shepperd's method; returns the w >= 0 representative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_exp(dtheta):
    dtheta = np.asarray(dtheta, dtype=float)
    th = np.linalg.norm(dtheta)
    if th < 1e-12:
        return np.array([1.0, *(0.5 * dtheta)])
    return np.array([np.cos(0.5 * th), *(np.sin(0.5 * th) / th * dtheta)])


def quat_log(q):
    q = np.asarray(q, dtype=float)
    w, v = q[0], q[1:4]
    if w < 0.0:
        w, v = -w, -v
    n = np.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v / w
    return 2.0 * np.arctan2(n, w) / n * v


def hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3): Log(Exp(phi) Exp(d)) ~ phi + Jr^-1(phi) d."""
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi)
    P = hat(phi)
    if th < 1e-6:
        return np.eye(3) + 0.5 * P + (1.0 / 12.0) * P @ P
    coef = 1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3) + 0.5 * P + coef * P @ P


def yaw_of(q):
    w, x, y, z = q
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


# batched variants over a leading axis


def quat_mul_batch(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_log_batch(q):
    q = np.asarray(q, dtype=float)
    sgn = np.where(q[:, 0] < 0.0, -1.0, 1.0)
    w = q[:, 0] * sgn
    v = q[:, 1:4] * sgn[:, None]
    n = np.linalg.norm(v, axis=1)
    small = n < 1e-12
    scale = np.empty_like(n)
    scale[small] = 2.0 / w[small]
    ns = n[~small]
    scale[~small] = 2.0 * np.arctan2(ns, w[~small]) / ns
    return v * scale[:, None]


def hat_batch(w):
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def right_jacobian_inv_batch(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=1)
    P = hat_batch(phi)
    coef = np.full_like(th, 1.0 / 12.0)
    big = th >= 1e-6
    tb = th[big]
    coef[big] = 1.0 / tb**2 - (1.0 + np.cos(tb)) / (2.0 * tb * np.sin(tb))
    return np.eye(3) + 0.5 * P + coef[:, None, None] * (P @ P)
