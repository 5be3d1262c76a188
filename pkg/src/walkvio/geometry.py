"""Rotation and pose algebra shared by the estimator modules.

Conventions: Hamilton quaternions stored (w, x, y, z); orientation errors are
right (body-frame) perturbations, ``R_true = R_est @ Exp(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(omega) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * K
        + ((1.0 - math.cos(theta)) / theta**2) * K @ K
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, via the quaternion for stability."""
    return quat_log_array(matrix_to_quat_array(R))


def right_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - ((1.0 - math.cos(theta)) / theta**2) * K
        + ((theta - math.sin(theta)) / theta**3) * K @ K
    )


def right_jacobian_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    K = skew(omega)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


# -- array quaternion helpers (w, x, y, z), broadcast over leading axes ------


def quat_multiply_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_exp_array(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta with Taylor fallback
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(half))
    q = np.concatenate([w[..., None], k[..., None] * omega], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_log_array(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    small = s < _SMALL_ANGLE
    angle = 2.0 * np.arctan2(s, w)
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), angle / np.where(small, 1.0, s))
    return scale[..., None] * vec


def quat_to_matrix_array(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat_array(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, vectorized; output hemisphere-normalized (w >= 0)."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    branch = np.where(tr > 0, 0, np.where((m00 > m11) & (m00 > m22), 1, np.where(m11 > m22, 2, 3)))
    radicand = np.stack([tr + 1.0, 1.0 + m00 - m11 - m22, 1.0 + m11 - m00 - m22, 1.0 + m22 - m00 - m11])
    rows = np.arange(m.shape[0])
    s = 2.0 * np.sqrt(np.maximum(radicand[branch, rows], 1e-300))
    a = m[:, 2, 1] - m[:, 1, 2]
    b = m[:, 0, 2] - m[:, 2, 0]
    c = m[:, 1, 0] - m[:, 0, 1]
    xy = m[:, 0, 1] + m[:, 1, 0]
    xz = m[:, 0, 2] + m[:, 2, 0]
    yz = m[:, 1, 2] + m[:, 2, 1]
    q4 = 0.25 * s
    cand = np.stack(
        [
            np.stack([q4, a / s, b / s, c / s], axis=-1),
            np.stack([a / s, q4, xy / s, xz / s], axis=-1),
            np.stack([b / s, xy / s, q4, yz / s], axis=-1),
            np.stack([c / s, xz / s, yz / s, q4], axis=-1),
        ]
    )
    out = cand[branch, rows]
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0] *= -1.0
    return out.reshape(R.shape[:-2] + (4,))


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    return quat_to_matrix_array(quat_exp_array(omega))


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    return quat_log_array(matrix_to_quat_array(R))


def right_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew_batch(omega)
    KK = K @ K
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5, (1.0 - np.cos(t)) / t**2)
    c2 = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / t**3)
    return np.eye(3) - c1[..., None, None] * K + c2[..., None, None] * KK


def right_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew_batch(omega)
    KK = K @ K
    small = theta < 1e-5
    t = np.where(small, 1.0, theta)
    coef = np.where(small, 1.0 / 12.0, 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    return np.eye(3) + 0.5 * K + coef[..., None, None] * KK


def canonical_quat_array(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


# -- value types ---------------------------------------------------------------


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit Hamilton quaternion, normalized and kept in the w >= 0 hemisphere."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        w, x, y, z = float(self.w), float(self.x), float(self.y), float(self.z)
        n2 = w * w + x * x + y * y + z * z
        if not math.isfinite(n2) or n2 == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        # renormalizing an already-unit value would perturb its last bits
        if abs(n2 - 1.0) > 1e-14:
            n = math.sqrt(n2)
            w, x, y, z = w / n, x / n, y / n, z / n
        if w < 0.0:
            w, x, y, z = -w, -x, -y, -z
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        return cls(*(float(c) for c in q))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "UnitQuaternion":
        return cls.from_array(matrix_to_quat_array(R))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        aw, ax, ay, az = self.w, self.x, self.y, self.z
        bw, bx, by, bz = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def rotate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        u = np.array([self.x, self.y, self.z])
        t = 2.0 * np.cross(u, v)
        return v + self.w * t + np.cross(u, t)

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix_array(self.as_array())

    def angle_to(self, other: "UnitQuaternion") -> float:
        return float(np.linalg.norm(quat_log(self.conjugate() * other)))


def quat_exp(omega) -> UnitQuaternion:
    """Exponential map from a rotation vector (rad) to a unit quaternion."""
    return UnitQuaternion.from_array(quat_exp_array(np.asarray(omega, dtype=float)))


def quat_log(q: UnitQuaternion) -> np.ndarray:
    return quat_log_array(q.as_array())


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose":
        inv = self.rotation.conjugate()
        return Pose(inv, -inv.rotate(self.translation))

    def apply(self, point) -> np.ndarray:
        return self.rotation.rotate(point) + self.translation

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.to_matrix()
        T[:3, 3] = self.translation
        return T

    def isclose(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            self.rotation.angle_to(other.rotation) <= tol
            and float(np.max(np.abs(self.translation - other.translation))) <= tol
        )


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def _frozen_vec(v) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BodyState:
    """Position, orientation, velocity and IMU biases of one window frame."""

    position: np.ndarray
    orientation: UnitQuaternion
    velocity: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("position", "velocity", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, _frozen_vec(getattr(self, name)))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def at_rest(cls, timestamp: float = 0.0) -> "BodyState":
        z = np.zeros(3)
        return cls(z, UnitQuaternion.identity(), z, z, z, timestamp)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return self.orientation.to_matrix()

    @property
    def pose(self) -> Pose:
        return Pose(self.orientation, self.position)

    def replace(self, **changes) -> "BodyState":
        fields = dict(
            position=self.position,
            orientation=self.orientation,
            velocity=self.velocity,
            accel_bias=self.accel_bias,
            gyro_bias=self.gyro_bias,
            timestamp=self.timestamp,
        )
        fields.update(changes)
        return BodyState(**fields)


def boxplus(state: BodyState, delta) -> BodyState:
    """Apply a 15-vector increment ordered (dp, dtheta, dv, dba, dbg)."""
    d = np.asarray(delta, dtype=float).reshape(15)
    return BodyState(
        state.position + d[0:3],
        state.orientation * quat_exp(d[3:6]),
        state.velocity + d[6:9],
        state.accel_bias + d[9:12],
        state.gyro_bias + d[12:15],
        state.timestamp,
    )


def boxminus(a: BodyState, b: BodyState) -> np.ndarray:
    """15-vector ``d`` with ``boxplus(b, d) == a``."""
    return np.concatenate(
        [
            a.position - b.position,
            quat_log(b.orientation.conjugate() * a.orientation),
            a.velocity - b.velocity,
            a.accel_bias - b.accel_bias,
            a.gyro_bias - b.gyro_bias,
        ]
    )
