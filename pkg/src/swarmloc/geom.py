"""SE(3) pose algebra on unit quaternions, plus bearing helpers.

Conventions used everywhere in this package:

- quaternions are ``(w, x, y, z)``, unit norm, canonicalized to ``w >= 0``
- rotations act on column vectors as ``R(q) @ v``; rotation matrices are
  derived values and never stored
- a bearing is a unit 3-vector expressed in the observer's body frame,
  with the camera boresight along body ``+x``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize to unit length and canonicalize the sign so w >= 0.

    Already-unit inputs pass through bit-exactly (idempotent), which keeps
    serialization round-trips stable.
    """
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    if abs(n - 1.0) > 1e-12:
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by q, i.e. R(q) @ v."""
    w = q[0]
    p = q[1:]
    pv = np.cross(p, v)
    return v + 2.0 * w * pv + 2.0 * np.cross(p, pv)


def quat_rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by the inverse of q, i.e. R(q).T @ v."""
    w = q[0]
    p = -q[1:]
    pv = np.cross(p, v)
    return v + 2.0 * w * pv + 2.0 * np.cross(p, pv)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(rotvec: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to unit quaternion."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        # first-order series keeps this exact to float precision near zero
        q = np.concatenate(([1.0], 0.5 * rotvec))
        return quat_normalize(q)
    axis = rotvec / angle
    half = 0.5 * angle
    return quat_normalize(np.concatenate(([np.cos(half)], np.sin(half) * axis)))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion to rotation vector (axis * angle)."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:] / q[0]
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] * (angle / s)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation q (unit quaternion, w >= 0) + translation t."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())
        if self.t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {self.t.shape}")

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix (derived value)."""
        m = np.eye(4)
        m[:3, :3] = quat_to_mat(self.q)
        m[:3, 3] = self.t
        return m


def identity_pose() -> Pose:
    return Pose(q=np.array([1.0, 0.0, 0.0, 0.0]), t=np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """a then b: the pose such that x_world = a(b(x))."""
    return Pose(q=quat_mul(a.q, b.q), t=a.t + quat_rotate(a.q, b.t))


def inverse(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(q=qi, t=-quat_rotate(qi, p.t))


def relative(p_i: Pose, p_j: Pose) -> Pose:
    """Pose of j expressed in the frame of i (both given in a shared frame)."""
    return compose(inverse(p_i), p_j)


def transform_point(p: Pose, v: np.ndarray) -> np.ndarray:
    return quat_rotate(p.q, v) + p.t


def bearing_to(observer: Pose, target_t: np.ndarray) -> np.ndarray:
    """Unit direction from observer to a world point, in the observer body frame.

    Raises ValueError when the target coincides with the observer.
    """
    d = np.asarray(target_t, dtype=np.float64) - observer.t
    n = float(np.linalg.norm(d))
    if n < 1e-6:
        raise ValueError("bearing undefined: target coincides with observer")
    return quat_rotate_inv(observer.q, d / n)


def poses_close(a: Pose, b: Pose, tol: float = UNIT_TOL) -> bool:
    """Equality up to quaternion double cover."""
    dq = min(np.linalg.norm(a.q - b.q), np.linalg.norm(a.q + b.q))
    return dq <= tol and np.linalg.norm(a.t - b.t) <= tol


def random_pose(rng: np.random.Generator, t_scale: float = 5.0) -> Pose:
    """Uniform random rotation (via normalized Gaussian quaternion) + Gaussian translation."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-3:
        q = rng.standard_normal(4)
    return Pose(q=q, t=rng.standard_normal(3) * t_scale)
