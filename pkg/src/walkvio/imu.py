"""IMU preintegration between consecutive window frames and its residual."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    BodyState,
    UnitQuaternion,
    quat_log_array,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    right_jacobian_inv_batch,
    skew,
    skew_batch,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_SAMPLE_GAP = 0.1
REPREINTEGRATE_THRESHOLD = 1e-2

# error-state block offsets, shared with the estimator
P, TH, V, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


class ImuDataError(ValueError):
    """Raised for unusable IMU batches (ordering, gaps, too few samples)."""


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: tuple
    gyro: tuple

    def as_row(self) -> np.ndarray:
        return np.array([self.timestamp, *self.accel, *self.gyro], dtype=float)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities."""

    accel: float = 0.02  # m/s^2/sqrt(Hz)
    gyro: float = 0.002  # rad/s/sqrt(Hz)
    accel_bias_walk: float = 1e-3  # m/s^3/sqrt(Hz)
    gyro_bias_walk: float = 1e-4  # rad/s^2/sqrt(Hz)

    def validate(self):
        for name in ("accel", "gyro", "accel_bias_walk", "gyro_bias_walk"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"noise density {name} must be positive")


def _as_rows(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        rows = np.asarray(samples, dtype=float)
    else:
        rows = np.array([s.as_row() if isinstance(s, ImuSample) else s for s in samples], dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 7:
        raise ImuDataError("IMU samples must be rows of (t, ax, ay, az, gx, gy, gz)")
    return rows


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_q: UnitQuaternion
    covariance: np.ndarray
    bias_jacobians: np.ndarray  # 15x6, columns (ba, bg)
    dt_total: float
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    samples: np.ndarray = field(repr=False)
    noise: ImuNoise = field(default_factory=ImuNoise)

    @property
    def delta_R(self) -> np.ndarray:
        return self.delta_q.to_matrix()

    @property
    def sqrt_information(self) -> np.ndarray:
        """Upper factor ``U`` with ``U.T @ U == inv(covariance)``."""
        cached = self.__dict__.get("_sqrt_info")
        if cached is None:
            info = np.linalg.inv(self.covariance)
            info = 0.5 * (info + info.T)
            cached = np.linalg.cholesky(info).T
            object.__setattr__(self, "_sqrt_info", cached)
        return cached

    def bias_deviation(self, accel_bias, gyro_bias) -> float:
        return float(
            max(
                np.linalg.norm(np.asarray(accel_bias) - self.accel_bias),
                np.linalg.norm(np.asarray(gyro_bias) - self.gyro_bias),
            )
        )

    def reintegrate(self, accel_bias, gyro_bias) -> "PreintegratedImu":
        return integrate(self.samples, np.concatenate([accel_bias, gyro_bias]), self.noise)

    def merge(self, later: "PreintegratedImu") -> "PreintegratedImu":
        """Preintegration over the concatenated interval, at this batch's bias."""
        if abs(later.samples[0, 0] - self.samples[-1, 0]) > 1e-9:
            raise ImuDataError("preintegration batches are not contiguous")
        rows = np.vstack([self.samples, later.samples[1:]])
        return integrate(rows, np.concatenate([self.accel_bias, self.gyro_bias]), self.noise)


def integrate(samples: Sequence | np.ndarray, bias, noise: ImuNoise | None = None) -> PreintegratedImu:
    """Midpoint preintegration of body-frame IMU samples.

    ``bias`` is the 6-vector (accel bias, gyro bias) the deltas are linearized
    about. The batch must cover the whole frame interval; the first and last
    sample timestamps bound it.
    """
    noise = noise or ImuNoise()
    noise.validate()
    rows = _as_rows(samples)
    if rows.shape[0] < 2:
        raise ImuDataError("preintegration needs at least two samples")
    t = rows[:, 0]
    dts = np.diff(t)
    if np.any(dts <= 0.0):
        k = int(np.argmax(dts <= 0.0))
        raise ImuDataError(f"non-monotonic IMU timestamps at sample {k + 1} (t={t[k + 1]!r})")
    if np.any(dts > MAX_SAMPLE_GAP):
        k = int(np.argmax(dts > MAX_SAMPLE_GAP))
        raise ImuDataError(f"IMU gap of {dts[k]:.3f} s after t={t[k]!r} (dropped data?)")

    bias = np.asarray(bias, dtype=float).reshape(6)
    ba, bg = bias[:3], bias[3:]
    acc = rows[:, 1:4]
    gyr = rows[:, 4:7]

    dp = np.zeros(3)
    dv = np.zeros(3)
    dR = np.eye(3)
    cov = np.zeros((15, 15))
    jac = np.zeros((15, 6))
    jac[BA, 0:3] = np.eye(3)
    jac[BG, 3:6] = np.eye(3)

    q_diag = np.repeat(
        [noise.accel**2, noise.gyro**2, noise.accel_bias_walk**2, noise.gyro_bias_walk**2], 3
    )
    A = np.eye(15)
    G = np.zeros((15, 12))
    I3 = np.eye(3)

    for k in range(rows.shape[0] - 1):
        dt = dts[k]
        w_mid = 0.5 * (gyr[k] + gyr[k + 1]) - bg
        dR_step = so3_exp(w_mid * dt)
        dR_next = dR @ dR_step
        f0 = acc[k] - ba
        f1 = acc[k + 1] - ba
        a_mid = 0.5 * (dR @ f0 + dR_next @ f1)

        f_hat = 0.5 * (f0 + dR_step @ f1)
        dR_fx = dR @ skew(f_hat)
        Jr = right_jacobian(w_mid * dt)
        A[:] = 0.0
        A[np.diag_indices(15)] = 1.0
        A[P, TH] = -0.5 * dR_fx * dt * dt
        A[P, V] = I3 * dt
        A[P, BA] = -0.5 * dR * dt * dt
        A[TH, TH] = dR_step.T
        A[TH, BG] = -Jr * dt
        A[V, TH] = -dR_fx * dt
        A[V, BA] = -dR * dt

        dp = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv = dv + a_mid * dt
        dR_prev = dR
        dR = dR_next

        # noise inputs (n_a, n_g, n_ba, n_bg); densities become variance/dt
        G[P, 0:3] = 0.5 * dR_prev * dt * dt
        G[V, 0:3] = dR_prev * dt
        G[TH, 3:6] = Jr * dt
        G[BA, 6:9] = I3 * dt
        G[BG, 9:12] = I3 * dt
        cov = A @ cov @ A.T + (G * q_diag / dt) @ G.T
        cov = 0.5 * (cov + cov.T)
        jac = A @ jac

    return PreintegratedImu(
        delta_p=dp,
        delta_v=dv,
        delta_q=UnitQuaternion.from_matrix(dR),
        covariance=cov,
        bias_jacobians=jac,
        dt_total=float(t[-1] - t[0]),
        accel_bias=ba.copy(),
        gyro_bias=bg.copy(),
        samples=rows.copy(),
        noise=noise,
    )


def _state_arrays(state: BodyState):
    return (
        state.position,
        state.rotation_matrix,
        state.velocity,
        state.accel_bias,
        state.gyro_bias,
    )


def imu_residual_arrays(pi, Ri, vi, bai, bgi, pj, Rj, vj, baj, bgj, pre: PreintegratedImu, gravity=GRAVITY):
    """Residual (15,) and Jacobians (15x15 each) w.r.t. the (i, j) error states."""
    dt = pre.dt_total
    J = pre.bias_jacobians
    dba = bai - pre.accel_bias
    dbg = bgi - pre.gyro_bias

    Jp_ba, Jp_bg = J[P, 0:3], J[P, 3:6]
    Jq_bg = J[TH, 3:6]
    Jv_ba, Jv_bg = J[V, 0:3], J[V, 3:6]

    corr_phi = Jq_bg @ dbg
    dR_corr = pre.delta_R @ so3_exp(corr_phi)
    dv_corr = pre.delta_v + Jv_ba @ dba + Jv_bg @ dbg
    dp_corr = pre.delta_p + Jp_ba @ dba + Jp_bg @ dbg

    RiT = Ri.T
    pos_term = RiT @ (pj - pi - vi * dt - 0.5 * gravity * dt * dt)
    vel_term = RiT @ (vj - vi - gravity * dt)
    E = dR_corr.T @ RiT @ Rj
    r_th = so3_log(E)

    r = np.empty(15)
    r[P] = pos_term - dp_corr
    r[TH] = r_th
    r[V] = vel_term - dv_corr
    r[BA] = baj - bai
    r[BG] = bgj - bgi

    Jri = np.zeros((15, 15))
    Jrj = np.zeros((15, 15))
    Jinv = right_jacobian_inv(r_th)

    Jri[P, P] = -RiT
    Jri[P, TH] = skew(pos_term)
    Jri[P, V] = -RiT * dt
    Jri[P, BA] = -Jp_ba
    Jri[P, BG] = -Jp_bg

    Jri[TH, TH] = -Jinv @ Rj.T @ Ri
    Jri[TH, BG] = -Jinv @ E.T @ right_jacobian(corr_phi) @ Jq_bg

    Jri[V, TH] = skew(vel_term)
    Jri[V, V] = -RiT
    Jri[V, BA] = -Jv_ba
    Jri[V, BG] = -Jv_bg

    Jri[BA, BA] = -np.eye(3)
    Jri[BG, BG] = -np.eye(3)

    Jrj[P, P] = RiT
    Jrj[TH, TH] = Jinv
    Jrj[V, V] = RiT
    Jrj[BA, BA] = np.eye(3)
    Jrj[BG, BG] = np.eye(3)
    return r, Jri, Jrj


def imu_residual(state_i: BodyState, state_j: BodyState, pre: PreintegratedImu, gravity=GRAVITY):
    """IMU residual ordered (p, theta, v, ba, bg) with Jacobians w.r.t. both states."""
    return imu_residual_arrays(*_state_arrays(state_i), *_state_arrays(state_j), pre, np.asarray(gravity, float))


def propagate(state: BodyState, pre: PreintegratedImu, gravity=GRAVITY) -> BodyState:
    """Predict the state at the end of ``pre`` from ``state`` (biases held)."""
    gravity = np.asarray(gravity, float)
    R = state.rotation_matrix
    dt = pre.dt_total
    dba = state.accel_bias - pre.accel_bias
    dbg = state.gyro_bias - pre.gyro_bias
    J = pre.bias_jacobians
    dR = pre.delta_R @ so3_exp(J[TH, 3:6] @ dbg)
    dv = pre.delta_v + J[V, 0:3] @ dba + J[V, 3:6] @ dbg
    dp = pre.delta_p + J[P, 0:3] @ dba + J[P, 3:6] @ dbg
    return BodyState(
        state.position + state.velocity * dt + 0.5 * gravity * dt * dt + R @ dp,
        UnitQuaternion.from_matrix(R @ dR),
        state.velocity + gravity * dt + R @ dv,
        state.accel_bias,
        state.gyro_bias,
        state.timestamp + dt,
    )


def delta_angle(pre: PreintegratedImu) -> np.ndarray:
    return quat_log_array(pre.delta_q.as_array())


@dataclass(frozen=True, eq=False)
class PreintegrationBatch:
    """Stacked preintegration quantities for vectorized residual evaluation."""

    dt: np.ndarray
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_R: np.ndarray
    bias_jacobians: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    sqrt_information: np.ndarray

    @classmethod
    def stack(cls, pres: Sequence[PreintegratedImu]) -> "PreintegrationBatch":
        return cls(
            np.array([p.dt_total for p in pres]),
            np.array([p.delta_p for p in pres]).reshape(-1, 3),
            np.array([p.delta_v for p in pres]).reshape(-1, 3),
            np.array([p.delta_R for p in pres]).reshape(-1, 3, 3),
            np.array([p.bias_jacobians for p in pres]).reshape(-1, 15, 6),
            np.array([p.accel_bias for p in pres]).reshape(-1, 3),
            np.array([p.gyro_bias for p in pres]).reshape(-1, 3),
            np.array([p.sqrt_information for p in pres]).reshape(-1, 15, 15),
        )

    def __len__(self) -> int:
        return len(self.dt)


def imu_residual_batch(pi, Ri, vi, bai, bgi, pj, Rj, vj, baj, bgj, pre: PreintegrationBatch, gravity=GRAVITY, jacobians=True):
    """Vectorized ``imu_residual_arrays``: residuals (n,15) and Jacobians (n,15,15) per frame pair."""
    g = np.asarray(gravity, float)
    dt = pre.dt[:, None]
    J = pre.bias_jacobians
    dba = bai - pre.accel_bias
    dbg = bgi - pre.gyro_bias
    corr_phi = np.einsum("nab,nb->na", J[:, TH, 3:6], dbg)
    dR_corr = pre.delta_R @ so3_exp_batch(corr_phi)
    dv_corr = pre.delta_v + np.einsum("nab,nb->na", J[:, V, 0:3], dba) + np.einsum("nab,nb->na", J[:, V, 3:6], dbg)
    dp_corr = pre.delta_p + np.einsum("nab,nb->na", J[:, P, 0:3], dba) + np.einsum("nab,nb->na", J[:, P, 3:6], dbg)

    RiT = np.transpose(Ri, (0, 2, 1))
    pos_term = np.einsum("nab,nb->na", RiT, pj - pi - vi * dt - 0.5 * g * dt * dt)
    vel_term = np.einsum("nab,nb->na", RiT, vj - vi - g * dt)
    E = np.transpose(dR_corr, (0, 2, 1)) @ RiT @ Rj
    r_th = so3_log_batch(E)

    n = len(pre)
    r = np.empty((n, 15))
    r[:, P] = pos_term - dp_corr
    r[:, TH] = r_th
    r[:, V] = vel_term - dv_corr
    r[:, BA] = baj - bai
    r[:, BG] = bgj - bgi
    if not jacobians:
        return r, None, None

    I3 = np.eye(3)
    Jinv = right_jacobian_inv_batch(r_th)
    Jri = np.zeros((n, 15, 15))
    Jrj = np.zeros((n, 15, 15))
    Jri[:, P, P] = -RiT
    Jri[:, P, TH] = skew_batch(pos_term)
    Jri[:, P, V] = -RiT * dt[:, :, None]
    Jri[:, P, BA] = -J[:, P, 0:3]
    Jri[:, P, BG] = -J[:, P, 3:6]
    Jri[:, TH, TH] = -Jinv @ np.transpose(Rj, (0, 2, 1)) @ Ri
    Jri[:, TH, BG] = -Jinv @ np.transpose(E, (0, 2, 1)) @ right_jacobian_batch(corr_phi) @ J[:, TH, 3:6]
    Jri[:, V, TH] = skew_batch(vel_term)
    Jri[:, V, V] = -RiT
    Jri[:, V, BA] = -J[:, V, 0:3]
    Jri[:, V, BG] = -J[:, V, 3:6]
    Jri[:, BA, BA] = -I3
    Jri[:, BG, BG] = -I3
    Jrj[:, P, P] = RiT
    Jrj[:, TH, TH] = Jinv
    Jrj[:, V, V] = RiT
    Jrj[:, BA, BA] = I3
    Jrj[:, BG, BG] = I3
    return r, Jri, Jrj
