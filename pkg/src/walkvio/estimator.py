"""Sliding-window visual-inertial estimator with stance-leg kinematic residuals.

Window variables are the body states of the last ``window_size`` camera
frames and the inverse depths of the features anchored in them. Each round
minimizes, by Levenberg-Marquardt,

    |r_prior|^2 + sum |r_imu|^2_Omega_I + sum rho(|r_cam|^2_Omega_C) + sum |Gamma r_leg|^2_Omega_L

where Gamma is the walking-motion factor (identity-like in fixed mode, absent
in pure VIO mode). When a new frame arrives at a full window, either the
oldest frame is marginalized into the prior (enough parallax) or the newest
frame is discarded and its IMU interval merged into the next one.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .adaptive import AdaptiveFactor, fixed_factor, frame_motion, window_factor
from .dataset import Dataset
from .geometry import (
    BodyState,
    UnitQuaternion,
    quat_exp_array,
    quat_multiply_array,
    quat_to_matrix_array,
    right_jacobian_inv,
    so3_log,
)
from .imu import (
    GRAVITY,
    REPREINTEGRATE_THRESHOLD,
    ImuNoise,
    PreintegratedImu,
    PreintegrationBatch,
    imu_residual_batch,
    integrate,
    propagate,
)
from .legs import INFO_REGULARIZER, LEG_IDS, LegModel, LegSnapshot, forward_kinematics
from .marginalization import EIGEN_EPS, MarginalizationPrior, schur_complement
from .solver import Linearization, SolveResult, SolverOptions, levenberg_marquardt
from .vision import CameraModel, TrackStore, TriangulationError, camera_poses, huber, reprojection_batch, triangulate

log = logging.getLogger(__name__)

MODES = ("vio", "vio-leg-fixed", "walk-vio")
LEG_WEIGHTING = ("residual", "information")
DEFAULT_NOISE = {"accel": 0.02, "gyro": 0.002, "accel_bias_walk": 1e-3, "gyro_bias_walk": 1e-4, "encoder": 0.002, "pixel": 1.0}


class SensorSyncError(ValueError):
    """Sensor timestamps disagree with the frame time, or IMU coverage is missing."""


@dataclass(frozen=True)
class WindowConfig:
    mode: str = "walk-vio"
    window_size: int = 10
    max_iterations: int = 8
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    function_tolerance: float = 1e-4
    initial_damping: float = 1e-8
    sigma_ref_sq: float = 4.0
    gamma_min: float = 0.5
    gamma_max: float = 5.0
    fixed_gamma: float = 1.0
    leg_weighting: str = "residual"
    huber_delta: float = 1.5
    keyframe_parallax: float = 2.0  # px; below it the newest frame is discarded instead
    triangulation_parallax: float = 1.0
    gauge_information: float = 1e8
    initial_prior: bool = True
    initial_velocity_std: float = 0.1
    initial_accel_bias_std: float = 0.1
    initial_gyro_bias_std: float = 0.01
    sync_tolerance: float = 1e-3
    min_depth: float = 0.1

    def validate(self) -> "WindowConfig":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.leg_weighting not in LEG_WEIGHTING:
            raise ValueError(f"leg_weighting must be one of {LEG_WEIGHTING}")
        if self.window_size < 3:
            raise ValueError("window size must be at least 3")
        if self.max_iterations < 1:
            raise ValueError("need at least one solver iteration")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ValueError("need 0 < gamma_min <= gamma_max")
        if not self.sigma_ref_sq > 0 or not self.fixed_gamma > 0:
            raise ValueError("sigma_ref_sq and fixed_gamma must be positive")
        return self

    @property
    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            max_iterations=self.max_iterations,
            gradient_tolerance=self.gradient_tolerance,
            step_tolerance=self.step_tolerance,
            function_tolerance=self.function_tolerance,
            initial_damping=self.initial_damping,
        )

    @property
    def uses_legs(self) -> bool:
        return self.mode != "vio"


# -- window variables ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WindowState:
    """Stacked window variables; the error state of frame k occupies columns 15k..15k+14."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    lam: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.p.shape[0]

    @property
    def dim(self) -> int:
        return 15 * self.n_frames + self.lam.shape[0]

    def retract(self, dx: np.ndarray) -> "WindowState":
        n = self.n_frames
        d = dx[: 15 * n].reshape(n, 15)
        q = quat_multiply_array(self.q, quat_exp_array(d[:, 3:6]))
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        q = np.where(q[:, :1] < 0, -q, q)
        return WindowState(
            self.p + d[:, 0:3], q, self.v + d[:, 6:9], self.ba + d[:, 9:12], self.bg + d[:, 12:15], self.lam + dx[15 * n :]
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in (self.p, self.q, self.v, self.ba, self.bg, self.lam))))


def _block_cols(idx: np.ndarray, width: int = 15, offset: int = 0, count: int = 15) -> np.ndarray:
    return (np.asarray(idx)[:, None] * width + offset + np.arange(count)[None, :]).astype(np.intp)


def _accumulate(H: np.ndarray, g: np.ndarray, J: np.ndarray, r: np.ndarray, cols: np.ndarray) -> None:
    """Scatter ``sum_n J_n^T J_n`` and ``sum_n J_n^T r_n`` for residual blocks J (n,k,c) on columns (n,c)."""
    if J.shape[0] == 0:
        return
    N = H.shape[0]
    JtJ = np.swapaxes(J, 1, 2) @ J
    Jtr = np.einsum("nkc,nk->nc", J, r)
    flat = (cols[:, :, None] * N + cols[:, None, :]).ravel()
    H += np.bincount(flat, weights=JtJ.ravel(), minlength=N * N).reshape(N, N)
    g += np.bincount(cols.ravel(), weights=Jtr.ravel(), minlength=N)


@dataclass(eq=False)
class GaugePrior:
    """Fixes world position and yaw of the first frame; optional weak velocity/bias priors."""

    p0: np.ndarray
    R0: np.ndarray
    v0: np.ndarray
    ba0: np.ndarray
    bg0: np.ndarray
    sqrt_info: float
    velocity_std: float | None = None
    accel_bias_std: float | None = None
    gyro_bias_std: float | None = None

    def evaluate(self, p, R, v, ba, bg):
        E = R @ self.R0.T
        phi = so3_log(E)
        rows = [self.sqrt_info * (p - self.p0), [self.sqrt_info * phi[2]]]
        J = [np.zeros((3, 15)), np.zeros((1, 15))]
        J[0][:, 0:3] = self.sqrt_info * np.eye(3)
        J[1][0, 3:6] = self.sqrt_info * (right_jacobian_inv(phi) @ self.R0)[2]
        for std, value, ref, sl in (
            (self.velocity_std, v, self.v0, slice(6, 9)),
            (self.accel_bias_std, ba, self.ba0, slice(9, 12)),
            (self.gyro_bias_std, bg, self.bg0, slice(12, 15)),
        ):
            if std:
                rows.append((value - ref) / std)
                Jb = np.zeros((3, 15))
                Jb[:, sl] = np.eye(3) / std
                J.append(Jb)
        return np.concatenate(rows), np.vstack(J)


@dataclass(eq=False)
class LegTerms:
    i: np.ndarray  # window indices
    j: np.ndarray
    s_i: np.ndarray  # (n,3) body-frame foot positions
    s_j: np.ndarray
    W: np.ndarray  # (n,3,3) whitening, including the walking-motion factor
    legs: list

    @classmethod
    def empty(cls) -> "LegTerms":
        z = np.zeros((0, 3))
        return cls(np.zeros(0, int), np.zeros(0, int), z, z.copy(), np.zeros((0, 3, 3)), [])

    def __len__(self) -> int:
        return len(self.i)


@dataclass(eq=False)
class VisionTerms:
    anchor: np.ndarray
    observer: np.ndarray
    landmark: np.ndarray
    rays: np.ndarray
    uv: np.ndarray

    @classmethod
    def empty(cls) -> "VisionTerms":
        e = np.zeros(0, int)
        return cls(e, e.copy(), e.copy(), np.zeros((0, 3)), np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.anchor)


class WindowProblem:
    """Cost of the window, evaluated on a fixed residual structure."""

    def __init__(
        self,
        n_frames: int,
        n_landmarks: int,
        imu: list,
        legs: LegTerms,
        vision: VisionTerms,
        camera: CameraModel,
        pixel_std: float,
        huber_delta: float,
        prior: MarginalizationPrior | None = None,
        prior_index: np.ndarray | None = None,
        gauge: GaugePrior | None = None,
        gravity=GRAVITY,
        min_depth: float = 0.1,
    ):
        self.n = n_frames
        self.m = n_landmarks
        self.dim = 15 * n_frames + n_landmarks
        self.imu = imu  # [(i, PreintegratedImu)] with j = i + 1
        self.imu_index = np.array([i for i, _ in imu], dtype=int)
        self.imu_batch = PreintegrationBatch.stack([pre for _, pre in imu]) if imu else None
        self.legs = legs
        self.vision = vision
        self.camera = camera
        self.pixel_std = pixel_std
        self.huber_delta = huber_delta
        self.prior = prior
        self.prior_index = prior_index
        self.gauge = gauge
        self.gravity = np.asarray(gravity, float)
        self.min_depth = min_depth
        self.last_parts: dict = {}

    # solver protocol
    def linearize(self, x: WindowState) -> Linearization:
        return self._evaluate(x, True)

    def cost(self, x: WindowState) -> float:
        return self._evaluate(x, False).cost

    def retract(self, x: WindowState, dx):
        return x.retract(dx)

    def norm(self, x: WindowState) -> float:
        return x.norm()

    def _evaluate(self, x: WindowState, jac: bool) -> Linearization:
        N = self.dim
        H = np.zeros((N, N)) if jac else None
        g = np.zeros(N) if jac else None
        parts = {}
        R = quat_to_matrix_array(x.q)

        if self.prior is not None:
            idx = self.prior_index
            r, J = self.prior.evaluate(x.p[idx], x.q[idx], x.v[idx], x.ba[idx], x.bg[idx])
            parts["prior"] = float(r @ r)
            if jac:
                cols = _block_cols(idx).ravel()
                H[np.ix_(cols, cols)] += J.T @ J
                g[cols] += J.T @ r

        if self.gauge is not None:
            r, J = self.gauge.evaluate(x.p[0], R[0], x.v[0], x.ba[0], x.bg[0])
            parts["gauge"] = float(r @ r)
            if jac:
                H[:15, :15] += J.T @ J
                g[:15] += J.T @ r

        if self.imu_index.size:
            i, j = self.imu_index, self.imu_index + 1
            rs, Ji, Jj = imu_residual_batch(
                x.p[i], R[i], x.v[i], x.ba[i], x.bg[i], x.p[j], R[j], x.v[j], x.ba[j], x.bg[j], self.imu_batch, self.gravity, jac
            )
            U = self.imu_batch.sqrt_information
            rs = np.einsum("nab,nb->na", U, rs)
            parts["imu"] = float(np.sum(rs * rs))
            if jac:
                Js = np.concatenate([U @ Ji, U @ Jj], axis=2)
                cols = np.concatenate([_block_cols(i), _block_cols(j)], axis=1)
                _accumulate(H, g, Js, rs, cols)

        L = self.legs
        if len(L):
            Ri, Rj = R[L.i], R[L.j]
            w = np.einsum("nab,nb->na", Ri, L.s_i) + x.p[L.i] - x.p[L.j]
            RjT_w = np.einsum("nba,nb->na", Rj, w)
            r = L.s_j - RjT_w
            e = np.einsum("nab,nb->na", L.W, r)
            parts["leg"] = float(np.sum(e * e))
            if jac:
                RjT = np.transpose(Rj, (0, 2, 1))
                J = np.zeros((len(L), 3, 12))
                J[:, :, 0:3] = -RjT
                J[:, :, 3:6] = (RjT @ Ri) @ _skew(L.s_i)
                J[:, :, 6:9] = RjT
                J[:, :, 9:12] = -_skew(RjT_w)
                J = L.W @ J
                cols = np.concatenate([_block_cols(L.i, count=6), _block_cols(L.j, count=6)], axis=1)
                _accumulate(H, g, J, e, cols)

        V = self.vision
        if len(V):
            a, o, l = V.anchor, V.observer, V.landmark
            lam = x.lam[l]
            out = reprojection_batch(R[a], x.p[a], R[o], x.p[o], V.rays, np.where(lam > 0, lam, 1.0), V.uv, self.camera, jac)
            r, Z = out[0], out[1]
            valid = (lam > 0) & (Z > self.min_depth)
            e = r / self.pixel_std
            sq = np.sum(e * e, axis=1)
            rho, scale = huber(sq, self.huber_delta / self.pixel_std)
            scale = np.where(valid, scale, 0.0)
            parts["vision"] = float(np.sum(np.where(valid, rho, 0.0)))
            parts["vision_inliers"] = int(np.count_nonzero(valid & (sq <= (self.huber_delta / self.pixel_std) ** 2)))
            if jac:
                J = out[2] * (scale / self.pixel_std)[:, None, None]
                e = e * scale[:, None]
                cols = np.concatenate(
                    [_block_cols(a, count=6), _block_cols(o, count=6), (15 * self.n + l)[:, None].astype(np.intp)], axis=1
                )
                _accumulate(H, g, J, e, cols)

        total = sum(v for k, v in parts.items() if k != "vision_inliers")
        self.last_parts = parts
        if jac:
            H = 0.5 * (H + H.T)
        return Linearization(float(total), H, g)


def _skew(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


# -- estimator --------------------------------------------------------------------------


@dataclass(eq=False)
class _Frame:
    frame_id: int
    timestamp: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    observations: dict
    feet: dict  # leg id -> (s, covariance) for legs in contact

    def state(self) -> BodyState:
        return BodyState(self.p, UnitQuaternion.from_array(self.q), self.v, self.ba, self.bg, self.timestamp)


@dataclass(frozen=True, eq=False)
class RoundRecord:
    frame_id: int
    timestamp: float
    window_size: int
    gamma: np.ndarray
    gamma_eigenvalues: np.ndarray  # (1, l1, l2) clamped, principal-first
    raw_eigenvalues: np.ndarray  # (l1, l2) normalized, unclamped
    gamma_applied: bool
    initial_cost: float
    final_cost: float
    cost_parts: dict
    n_landmarks: int
    n_vision: int
    n_leg: int
    iterations: int
    reason: str
    converged: bool
    slide: str  # "", "marginalize_oldest" or "discard_newest"


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    frame_ids: np.ndarray
    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    velocities: np.ndarray
    rounds: tuple

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def eigenvalue_history(self) -> np.ndarray:
        return np.array([r.raw_eigenvalues for r in self.rounds]).reshape(-1, 2)

    @property
    def failed_rounds(self) -> int:
        return sum(1 for r in self.rounds if r.reason == "failed")


class Estimator:
    def __init__(
        self,
        config: WindowConfig,
        camera: CameraModel,
        legs: Mapping[str, LegModel],
        imu_noise: ImuNoise,
        encoder_std: float,
        pixel_std: float,
        gravity=GRAVITY,
        initial_state: BodyState | None = None,
    ):
        self.config = config.validate()
        self.camera = camera
        self.leg_models = dict(legs)
        self.imu_noise = imu_noise
        self.encoder_std = encoder_std
        self.pixel_std = pixel_std
        self.gravity = np.asarray(gravity, float)
        self.initial_state = initial_state or BodyState.at_rest()
        self.frames: list[_Frame] = []
        self.imu: list[PreintegratedImu] = []  # imu[k] spans frames k, k+1
        self.stance: list[dict] = []  # stance[k][leg] true if the leg stayed planted over that interval
        self.tracks = TrackStore(max_age=config.window_size)
        self.prior: MarginalizationPrior | None = None
        self.gauge_frame: int | None = None
        self.factor: AdaptiveFactor = fixed_factor(1.0)
        self.raw_factor: AdaptiveFactor = fixed_factor(1.0)
        self.last_slide = ""
        self.rank_deficits = 0
        self.rounds: list[RoundRecord] = []

    # -- bookkeeping -----------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_ids(self) -> list:
        return [f.frame_id for f in self.frames]

    def states(self) -> dict:
        return {f.frame_id: f.state() for f in self.frames}

    def _feet(self, snapshots: Mapping[str, LegSnapshot], timestamp: float) -> dict:
        feet = {}
        for leg_id, snap in snapshots.items():
            if abs(snap.timestamp - timestamp) > self.config.sync_tolerance:
                raise SensorSyncError(f"leg {leg_id} snapshot at t={snap.timestamp!r} does not match frame t={timestamp!r}")
            if not snap.contact:
                continue
            model = self.leg_models[leg_id]
            s, J = forward_kinematics(model, snap.joint_angles)
            feet[leg_id] = (s, self.encoder_std**2 * (J @ J.T))
        return feet

    def _check_imu(self, rows: np.ndarray, t0: float, t1: float) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        tol = self.config.sync_tolerance
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise SensorSyncError(f"missing IMU coverage between t={t0!r} and t={t1!r}")
        if abs(rows[0, 0] - t0) > tol or abs(rows[-1, 0] - t1) > tol:
            raise SensorSyncError(
                f"IMU batch spans [{rows[0, 0]!r}, {rows[-1, 0]!r}] but the frame interval is [{t0!r}, {t1!r}]"
            )
        return rows

    def add_frame(
        self,
        frame_id: int,
        timestamp: float,
        imu_rows,
        legs: Mapping[str, LegSnapshot],
        observations: Mapping[int, tuple],
        stance: Mapping[str, bool] | None = None,
    ) -> None:
        """Register a camera frame, initialized by IMU propagation from the newest state."""
        timestamp = float(timestamp)
        feet = self._feet(legs, timestamp) if self.config.uses_legs else {}
        obs = {int(k): (float(u), float(v)) for k, (u, v) in observations.items()}
        self.last_slide = ""
        if not self.frames:
            s = self.initial_state
            self.frames.append(
                _Frame(frame_id, timestamp, s.position.copy(), s.orientation.as_array(), s.velocity.copy(), s.accel_bias.copy(), s.gyro_bias.copy(), obs, feet)
            )
            self.gauge_frame = frame_id
            self.tracks.update(frame_id, obs)
            return
        last = self.frames[-1]
        if timestamp <= last.timestamp:
            raise SensorSyncError(f"frame t={timestamp!r} is not after the newest frame t={last.timestamp!r}")
        rows = self._check_imu(imu_rows, last.timestamp, timestamp)
        stance = dict(stance) if stance is not None else {k: True for k in LEG_IDS}

        if len(self.frames) >= self.config.window_size:
            if self._parallax(last.observations, obs) >= self.config.keyframe_parallax:
                self.marginalize_oldest()
                self.last_slide = "marginalize_oldest"
            else:
                rows, stance = self._discard_newest(rows, stance)
                self.last_slide = "discard_newest"

        base = self.frames[-1]
        pre = integrate(rows, np.concatenate([base.ba, base.bg]), self.imu_noise)
        pred = propagate(base.state(), pre, self.gravity)
        self.frames.append(
            _Frame(frame_id, timestamp, pred.position.copy(), pred.orientation.as_array(), pred.velocity.copy(), base.ba.copy(), base.bg.copy(), obs, feet)
        )
        self.imu.append(pre)
        self.stance.append(stance)
        self.tracks.update(frame_id, obs)

    @staticmethod
    def _parallax(a: Mapping, b: Mapping) -> float:
        common = sorted(set(a).intersection(b))
        if not common:
            return math.inf
        d = np.array([b[k] for k in common]) - np.array([a[k] for k in common])
        return float(np.mean(np.linalg.norm(d, axis=1)))

    def _discard_newest(self, rows: np.ndarray, stance: dict):
        """Drop the newest window frame; its IMU interval is prepended to the incoming one."""
        dropped = self.frames.pop()
        pre = self.imu.pop()
        prev_stance = self.stance.pop()
        self.tracks.drop_frame(dropped.frame_id)
        for track in self.tracks.tracks.values():
            if track.anchor_frame is not None and track.anchor_frame not in track.observations:
                track.anchor_frame, track.inv_depth = None, None
        merged = np.vstack([pre.samples, rows[1:]])
        both = {k: bool(prev_stance.get(k, False) and stance.get(k, False)) for k in set(prev_stance) | set(stance)}
        return merged, both

    # -- residual structure ------------------------------------------------------------------

    def leg_pairs(self) -> list:
        """(k, leg id) for every stance leg in contact at both ends of interval k."""
        out = []
        for k in range(len(self.frames) - 1):
            a, b = self.frames[k].feet, self.frames[k + 1].feet
            for leg_id in LEG_IDS:
                if leg_id in a and leg_id in b and self.stance[k].get(leg_id, False):
                    out.append((k, leg_id))
        return out

    def _leg_terms(self, factor: AdaptiveFactor, pairs=None) -> LegTerms:
        if not self.config.uses_legs:
            return LegTerms.empty()
        pairs = self.leg_pairs() if pairs is None else pairs
        if not pairs:
            return LegTerms.empty()
        G = factor.gamma
        W, si, sj = [], [], []
        for k, leg_id in pairs:
            s_i, cov_i = self.frames[k].feet[leg_id]
            s_j, cov_j = self.frames[k + 1].feet[leg_id]
            omega = np.linalg.inv(cov_i + cov_j + INFO_REGULARIZER * np.eye(3))
            omega = 0.5 * (omega + omega.T)
            if self.config.leg_weighting == "residual":
                W.append(np.linalg.cholesky(omega).T @ G)
            else:
                star = G.T @ omega @ G
                W.append(np.linalg.cholesky(0.5 * (star + star.T)).T)
            si.append(s_i)
            sj.append(s_j)
        ks = np.array([k for k, _ in pairs])
        return LegTerms(ks, ks + 1, np.array(si), np.array(sj), np.array(W), [leg for _, leg in pairs])

    def _active_tracks(self, anchor_only: int | None = None) -> list:
        """Initialized tracks anchored in the window with at least one further observation there."""
        idx = {f.frame_id: k for k, f in enumerate(self.frames)}
        out = []
        for fid in sorted(self.tracks.tracks):
            t = self.tracks.tracks[fid]
            if not t.initialized or t.anchor_frame not in idx:
                continue
            if anchor_only is not None and t.anchor_frame != anchor_only:
                continue
            if sum(1 for f in t.observations if f in idx and f != t.anchor_frame) == 0:
                continue
            out.append(t)
        return out

    def _vision_terms(self, tracks: list) -> VisionTerms:
        idx = {f.frame_id: k for k, f in enumerate(self.frames)}
        a, o, l, rays, uv = [], [], [], [], []
        for li, t in enumerate(tracks):
            ray = self.camera.ray(np.array(t.observations[t.anchor_frame]))
            for f in sorted(t.observations):
                if f == t.anchor_frame or f not in idx:
                    continue
                a.append(idx[t.anchor_frame])
                o.append(idx[f])
                l.append(li)
                rays.append(ray)
                uv.append(t.observations[f])
        if not a:
            return VisionTerms.empty()
        return VisionTerms(np.array(a), np.array(o), np.array(l), np.array(rays), np.array(uv, dtype=float))

    def _gauge(self) -> GaugePrior | None:
        if not self.frames or self.frames[0].frame_id != self.gauge_frame:
            return None
        s = self.initial_state
        c = self.config
        init = c.initial_prior
        return GaugePrior(
            s.position.copy(),
            s.rotation_matrix,
            s.velocity.copy(),
            s.accel_bias.copy(),
            s.gyro_bias.copy(),
            math.sqrt(c.gauge_information),
            c.initial_velocity_std if init else None,
            c.initial_accel_bias_std if init else None,
            c.initial_gyro_bias_std if init else None,
        )

    def _prior_index(self):
        if self.prior is None:
            return None
        idx = {f.frame_id: k for k, f in enumerate(self.frames)}
        return np.array([idx[f] for f in self.prior.frame_ids])

    def _window_state(self, tracks: list) -> WindowState:
        F = self.frames
        return WindowState(
            np.array([f.p for f in F]),
            np.array([f.q for f in F]),
            np.array([f.v for f in F]),
            np.array([f.ba for f in F]),
            np.array([f.bg for f in F]),
            np.array([t.inv_depth for t in tracks], dtype=float),
        )

    def _store(self, x: WindowState, tracks: list) -> None:
        for k, f in enumerate(self.frames):
            f.p, f.q, f.v, f.ba, f.bg = x.p[k].copy(), x.q[k].copy(), x.v[k].copy(), x.ba[k].copy(), x.bg[k].copy()
        for t, lam in zip(tracks, x.lam):
            t.inv_depth = float(lam) if lam > 0 and math.isfinite(lam) else None
            if t.inv_depth is None:
                t.anchor_frame = None

    def _problem(self, tracks, legs: LegTerms, imu_pairs, prior=True, gauge=True) -> WindowProblem:
        return WindowProblem(
            len(self.frames),
            len(tracks),
            imu_pairs,
            legs,
            self._vision_terms(tracks),
            self.camera,
            self.pixel_std,
            self.config.huber_delta,
            prior=self.prior if prior else None,
            prior_index=self._prior_index() if prior else None,
            gauge=self._gauge() if gauge else None,
            gravity=self.gravity,
            min_depth=self.config.min_depth,
        )

    # -- rounds ------------------------------------------------------------------------------

    def frame_motions(self) -> list:
        return [
            frame_motion(self.frames[k - 1].observations, self.frames[k].observations, self.frames[k].frame_id)
            for k in range(1, len(self.frames))
        ]

    def update_factor(self) -> AdaptiveFactor:
        c = self.config
        self.raw_factor = window_factor(self.frame_motions(), c.sigma_ref_sq, c.gamma_min, c.gamma_max)
        if c.mode == "walk-vio":
            self.factor = self.raw_factor
        else:
            self.factor = fixed_factor(c.fixed_gamma, len(self.frames))
        return self.factor

    def _repreintegrate(self) -> None:
        for k, pre in enumerate(self.imu):
            f = self.frames[k]
            if pre.bias_deviation(f.ba, f.bg) > REPREINTEGRATE_THRESHOLD:
                self.imu[k] = pre.reintegrate(f.ba, f.bg)

    def _triangulate_new(self) -> None:
        states = None
        in_window = {f.frame_id for f in self.frames}
        for fid in sorted(self.tracks.tracks):
            t = self.tracks.tracks[fid]
            if t.initialized and t.anchor_frame in in_window:
                continue
            if sum(1 for f in t.observations if f in in_window) < 2:
                continue
            if states is None:
                states = self.states()
                poses = camera_poses(states, self.camera)
            t.anchor_frame = min(f for f in t.observations if f in in_window)
            try:
                lam = triangulate(t, states, self.camera, self.config.triangulation_parallax, poses)
            except TriangulationError:
                t.inv_depth = None
                continue
            t.inv_depth = lam if 1.0 / lam > self.config.min_depth else None

    def window_problem(self, factor: AdaptiveFactor | None = None):
        """Cost of the current window and its variables: ``(problem, x0, tracks)``."""
        tracks = self._active_tracks()
        legs = self._leg_terms(factor or self.factor)
        return self._problem(tracks, legs, list(enumerate(self.imu))), self._window_state(tracks), tracks

    def optimize(self) -> SolveResult:
        if len(self.frames) < 2:
            raise ValueError("optimization needs at least two frames in the window")
        self._repreintegrate()
        self._triangulate_new()
        factor = self.update_factor()
        problem, x0, tracks = self.window_problem(factor)
        legs = problem.legs
        result = levenberg_marquardt(problem, x0, self.config.solver_options)
        if math.isfinite(result.cost):
            self._store(result.x, tracks)
        else:
            log.warning("frame %s: solver failed, keeping the previous estimate", self.frames[-1].frame_id)
        problem.cost(result.x)
        newest = self.frames[-1]
        self.rounds.append(
            RoundRecord(
                frame_id=newest.frame_id,
                timestamp=newest.timestamp,
                window_size=len(self.frames),
                gamma=factor.gamma.copy(),
                gamma_eigenvalues=self.raw_factor.eigenvalues.copy(),
                raw_eigenvalues=self.raw_factor.raw_eigenvalues.copy(),
                gamma_applied=self.config.mode == "walk-vio",
                initial_cost=result.initial_cost,
                final_cost=result.cost,
                cost_parts=dict(problem.last_parts),
                n_landmarks=len(tracks),
                n_vision=len(problem.vision),
                n_leg=len(legs),
                iterations=result.iterations,
                reason=result.reason,
                converged=result.converged,
                slide=self.last_slide,
            )
        )
        return result

    def marginalize_oldest(self) -> MarginalizationPrior | None:
        """Fold every residual touching the oldest frame into the prior, then drop that frame."""
        if len(self.frames) < 2:
            raise ValueError("nothing to marginalize")
        oldest = self.frames[0]
        tracks = self._active_tracks(anchor_only=oldest.frame_id)
        pairs = [(k, leg) for k, leg in self.leg_pairs() if k == 0]
        legs = self._leg_terms(self.factor, pairs)
        prior_touches = self.prior is not None and oldest.frame_id in self.prior.frame_ids
        problem = self._problem(tracks, legs, [(0, self.imu[0])], prior=prior_touches)
        has_terms = prior_touches or problem.gauge is not None or problem.imu or len(legs) or len(problem.vision)
        if has_terms:
            lin = problem.linearize(self._window_state(tracks))
            H, b = lin.H, lin.g
            n = len(self.frames)
            diag = np.abs(np.diag(H)[: 15 * n]).reshape(n, 15).sum(axis=1)
            keep_frames = [k for k in range(1, n) if diag[k] > 0.0]
            if self.prior is not None and not prior_touches:
                # untouched old prior survives alongside the new one; merge them on shared columns
                keep_frames = sorted(set(keep_frames) | set(self._prior_index().tolist()))
            marg = np.concatenate([np.arange(15), 15 * n + np.arange(len(tracks))]).astype(np.intp)
            keep = _block_cols(np.array(keep_frames, dtype=int)).ravel() if keep_frames else np.zeros(0, np.intp)
            if self.prior is not None and not prior_touches:
                idx = self._prior_index()
                x = self._window_state(tracks)
                r, J = self.prior.evaluate(x.p[idx], x.q[idx], x.v[idx], x.ba[idx], x.bg[idx])
                cols = _block_cols(idx).ravel()
                H[np.ix_(cols, cols)] += J.T @ J
                b[cols] += J.T @ r
            Hs, bs, deficit = schur_complement(H, b, marg, keep, EIGEN_EPS)
            self.rank_deficits += deficit
            if keep_frames:
                F = [self.frames[k] for k in keep_frames]
                self.prior = MarginalizationPrior.from_information(
                    [f.frame_id for f in F],
                    [f.p for f in F],
                    [f.q for f in F],
                    [f.v for f in F],
                    [f.ba for f in F],
                    [f.bg for f in F],
                    Hs,
                    bs,
                )
            else:
                self.prior = None
        marginalized = {t.feature_id for t in tracks}
        for fid in marginalized:
            del self.tracks.tracks[fid]
        self.tracks.drop_frame(oldest.frame_id)
        for track in self.tracks.tracks.values():
            if track.anchor_frame == oldest.frame_id or (track.anchor_frame is not None and track.anchor_frame not in track.observations):
                track.anchor_frame, track.inv_depth = None, None
        self.frames.pop(0)
        if self.imu:
            self.imu.pop(0)
            self.stance.pop(0)
        return self.prior

    def newest_state(self) -> BodyState:
        return self.frames[-1].state()


# -- running a dataset ----------------------------------------------------------------------


def _noise_from_header(noise: Mapping) -> dict:
    out = {}
    for key, default in DEFAULT_NOISE.items():
        v = float(noise.get(key, 0.0) or 0.0)
        out[key] = v if v > 0.0 else default
    return out


def initial_state_from_dataset(ds: Dataset) -> BodyState:
    """Ground-truth state at the first camera frame (zero biases), or rest at the origin."""
    if len(ds.gt) == 0 or len(ds.cam_t) == 0:
        return BodyState.at_rest(float(ds.cam_t[0]) if len(ds.cam_t) else 0.0)
    t0 = float(ds.cam_t[0])
    k = int(np.argmin(np.abs(ds.gt[:, 0] - t0)))
    row = ds.gt[k]
    z = np.zeros(3)
    return BodyState(row[1:4], UnitQuaternion.from_array(row[4:8]), row[8:11], z, z, t0)


def make_estimator(ds: Dataset, config: WindowConfig, initial_state: BodyState | None = None) -> Estimator:
    h = ds.header
    noise = _noise_from_header(h.noise)
    imu_noise = ImuNoise(noise["accel"], noise["gyro"], noise["accel_bias_walk"], noise["gyro_bias_walk"])
    camera = dataclasses.replace(h.camera, pixel_std=noise["pixel"])
    return Estimator(
        config,
        camera,
        h.legs,
        imu_noise,
        noise["encoder"],
        noise["pixel"],
        h.gravity,
        initial_state if initial_state is not None else initial_state_from_dataset(ds),
    )


@dataclass(eq=False)
class _FrameInputs:
    frame_id: int
    timestamp: float
    imu: np.ndarray | None
    legs: dict
    observations: dict
    stance: dict


def frame_inputs(ds: Dataset, tol: float = 1e-3, max_frames: int | None = None):
    """Per-camera-frame sensor bundles in time order."""
    obs = ds.frame_observations()
    imu_t = ds.imu[:, 0] if len(ds.imu) else np.zeros(0)
    jt = ds.jnt_t
    prev_t = None
    n = len(ds.cam_t) if max_frames is None else min(max_frames, len(ds.cam_t))
    for k in range(n):
        t = float(ds.cam_t[k])
        fid = int(ds.cam_id[k])
        a, b = np.searchsorted(jt, [t - tol, t + tol], side="left")
        legs = {}
        for row in range(a, b):
            leg_id = LEG_IDS[int(ds.jnt_leg[row])]
            legs[leg_id] = LegSnapshot(float(jt[row]), leg_id, ds.jnt_q[row].copy(), bool(ds.jnt_contact[row]))
        imu = None
        stance = {}
        if prev_t is not None:
            i0, i1 = np.searchsorted(imu_t, [prev_t - tol, t + tol], side="left")
            imu = ds.imu[i0:i1]
            e0, e1 = np.searchsorted(jt, [prev_t - tol, t + tol], side="left")
            for li, leg_id in enumerate(LEG_IDS):
                sel = ds.jnt_leg[e0:e1] == li
                stance[leg_id] = bool(np.all(ds.jnt_contact[e0:e1][sel])) if np.any(sel) else False
        yield _FrameInputs(fid, t, imu, legs, obs.get(fid, {}), stance)
        prev_t = t


def run_estimator(
    ds: Dataset,
    config: WindowConfig | None = None,
    initial_state: BodyState | None = None,
    max_frames: int | None = None,
    callback=None,
) -> EstimatorOutput:
    """Process every camera frame; one output pose (the newest window state) per frame."""
    config = (config or WindowConfig()).validate()
    est = make_estimator(ds, config, initial_state)
    ids, ts, ps, qs, vs = [], [], [], [], []
    for inp in frame_inputs(ds, config.sync_tolerance, max_frames):
        est.add_frame(inp.frame_id, inp.timestamp, inp.imu, inp.legs, inp.observations, inp.stance)
        if len(est) >= 2:
            est.optimize()
        s = est.frames[-1]
        ids.append(s.frame_id)
        ts.append(s.timestamp)
        ps.append(s.p.copy())
        qs.append(s.q.copy())
        vs.append(s.v.copy())
        if callback is not None:
            callback(est)
    return EstimatorOutput(
        np.array(ids, dtype=int),
        np.array(ts),
        np.array(ps).reshape(-1, 3),
        np.array(qs).reshape(-1, 4),
        np.array(vs).reshape(-1, 3),
        tuple(est.rounds),
    )
