"""Quaternion / SO(3) primitives on the autodiff tape.

Each op has a hand-derived vector-Jacobian product and is validated by
gradcheck in the test suite. Quaternions are (w, x, y, z); these ops do
NOT canonicalize sign (a data-dependent flip is not differentiable), so
callers keep rotations in the w > 0 half-space where it matters.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, astensor, div, norm, record

_SMALL = 1e-8


def _lmat(a: np.ndarray) -> np.ndarray:
    w, x, y, z = a
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def _rmat(b: np.ndarray) -> np.ndarray:
    w, x, y, z = b
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def _rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_mul(a, b) -> Tensor:
    """Hamilton product; bilinear, so both vjps are constant matrices."""
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    return record(
        _lmat(ad) @ bd,
        (a, b),
        (
            lambda g, m=_rmat(bd).T: m @ g,
            lambda g, m=_lmat(ad).T: m @ g,
        ),
    )


def quat_rotate(q, v) -> Tensor:
    """R(q) @ v for a unit quaternion q."""
    q, v = astensor(q), astensor(v)
    qd, vd = q.data, v.data
    w, p = qd[0], qd[1:]
    out = (w * w - p @ p) * vd + 2.0 * (p @ vd) * p + 2.0 * w * np.cross(p, vd)

    def vjp_q(g, w=w, p=p, vd=vd):
        gw = g @ (2.0 * w * vd + 2.0 * np.cross(p, vd))
        gp = (
            -2.0 * p * (vd @ g)
            + 2.0 * (p @ vd) * g
            + 2.0 * vd * (p @ g)
            + 2.0 * w * np.cross(vd, g)
        )
        return np.concatenate(([gw], gp))

    return record(out, (q, v), (vjp_q, lambda g, m=_rot(qd).T: m @ g))


def quat_rotate_inv(q, v) -> Tensor:
    """R(q).T @ v for a unit quaternion q."""
    q, v = astensor(q), astensor(v)
    qd, vd = q.data, v.data
    cj = np.array([qd[0], -qd[1], -qd[2], -qd[3]])
    w, p = cj[0], cj[1:]
    out = (w * w - p @ p) * vd + 2.0 * (p @ vd) * p + 2.0 * w * np.cross(p, vd)

    def vjp_q(g, w=w, p=p, vd=vd):
        gw = g @ (2.0 * w * vd + 2.0 * np.cross(p, vd))
        gp = (
            -2.0 * p * (vd @ g)
            + 2.0 * (p @ vd) * g
            + 2.0 * vd * (p @ g)
            + 2.0 * w * np.cross(vd, g)
        )
        # chain through conjugation: vector-part gradient flips sign
        return np.concatenate(([gw], -gp))

    return record(out, (q, v), (vjp_q, lambda g, m=_rot(cj).T: m @ g))


def quat_to_mat(q) -> Tensor:
    q = astensor(q)
    w, x, y, z = q.data

    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)

    def vjp(g, mats=(dw, dx, dy, dz)):
        return np.array([(g * m).sum() for m in mats])

    return record(_rot(q.data), (q,), (vjp,))


def quat_exp(rotvec) -> Tensor:
    """Exponential map: rotation vector to unit quaternion; smooth at zero."""
    rv = astensor(rotvec)
    w = rv.data
    theta = float(np.linalg.norm(w))
    half = 0.5 * theta
    if theta < _SMALL:
        cw = 1.0 - half * half / 2.0
        k = 0.5 - theta * theta / 48.0
        c1 = 0.25 - theta * theta / 96.0
        kp_over = -1.0 / 24.0
    else:
        cw = np.cos(half)
        k = np.sin(half) / theta
        c1 = np.sin(half) / (2.0 * theta)
        kp_over = (half * np.cos(half) - np.sin(half)) / theta**3
    out = np.concatenate(([cw], k * w))

    def vjp(g, w=w, k=k, c1=c1, kp_over=kp_over):
        gw, gv = g[0], g[1:]
        return -gw * c1 * w + k * gv + kp_over * (w @ gv) * w

    return record(out, (rv,), (vjp,))


def quat_log(q) -> Tensor:
    """Logarithm map: unit quaternion to rotation vector; smooth at identity."""
    q = astensor(q)
    qd = q.data
    sgn = 1.0 if qd[0] >= 0.0 else -1.0
    qe = sgn * qd
    w, p = qe[0], qe[1:]
    s = float(np.linalg.norm(p))
    r2 = w * w + s * s
    if s < _SMALL:
        alpha = (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
        beta = -4.0 / (3.0 * w**3)
    else:
        alpha = 2.0 * np.arctan2(s, w) / s
        beta = 2.0 * w / (r2 * s * s) - alpha / (s * s)
    out = alpha * p

    def vjp(g, w=w, p=p, alpha=alpha, beta=beta, r2=r2, sgn=sgn):
        gw = -(2.0 / r2) * (p @ g)
        gp = alpha * g + beta * (p @ g) * p
        return sgn * np.concatenate(([gw], gp))

    return record(out, (q,), (vjp,))


def skew(v) -> Tensor:
    """3-vector to its cross-product matrix; linear."""
    v = astensor(v)
    x, y, z = v.data
    out = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])

    def vjp(g):
        return np.array([g[2, 1] - g[1, 2], g[0, 2] - g[2, 0], g[1, 0] - g[0, 1]])

    return record(out, (v,), (vjp,))


def vnormalize(t) -> Tensor:
    """t / ||t|| via composed primitives."""
    return div(t, norm(t))
