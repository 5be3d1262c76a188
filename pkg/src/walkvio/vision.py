"""Feature tracks, inverse-depth triangulation and the reprojection residual.

Landmarks are parameterized by inverse depth along the ray of their anchor
(first) observation. The anchor pixel is treated as exact; every later
observation contributes one 2-vector residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .geometry import BodyState, Pose, UnitQuaternion, skew_batch

HUBER_DELTA = 1.5  # px


class TriangulationError(ValueError):
    pass


class LowParallaxError(TriangulationError):
    pass


class CheiralityError(ValueError):
    """Point behind (or on the plane of) a camera."""


def forward_camera_mount(offset=(0.3, 0.0, 0.05)) -> Pose:
    """Camera looking along body +x with image x toward body -y and image y toward body -z."""
    R_bc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return Pose(UnitQuaternion.from_matrix(R_bc), np.asarray(offset, dtype=float))


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float = 250.0
    fy: float = 250.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    body_T_cam: Pose = field(default_factory=forward_camera_mount)
    pixel_std: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def R_bc(self) -> np.ndarray:
        cached = self.__dict__.get("_R_bc")
        if cached is None:
            cached = self.body_T_cam.rotation.to_matrix()
            object.__setattr__(self, "_R_bc", cached)
        return cached

    @property
    def t_bc(self) -> np.ndarray:
        return self.body_T_cam.translation

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] <= self.width) & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height)

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        p_cam = np.asarray(p_cam, dtype=float)
        z = p_cam[..., 2]
        return np.stack([self.fx * p_cam[..., 0] / z + self.cx, self.fy * p_cam[..., 1] / z + self.cy], axis=-1)

    def ray(self, uv) -> np.ndarray:
        """Normalized ray (x, y, 1) in the camera frame."""
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])], axis=-1
        )

    def world_T_cam(self, state: BodyState) -> Pose:
        return state.pose.compose(self.body_T_cam)


@dataclass(frozen=True)
class FeatureObservation:
    feature_id: int
    frame: int
    u: float
    v: float

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass
class FeatureTrack:
    feature_id: int
    observations: dict = field(default_factory=dict)  # frame -> (u, v)
    inv_depth: float | None = None
    anchor_frame: int | None = None
    age: int = 0  # frames since last observation

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def frames(self) -> list:
        return sorted(self.observations)

    @property
    def initialized(self) -> bool:
        return self.inv_depth is not None and self.inv_depth > 0.0

    def anchor(self) -> int:
        return self.anchor_frame if self.anchor_frame is not None else min(self.observations)


class TrackStore:
    """Id-keyed feature association; tracks unseen for ``max_age`` frames are retired."""

    def __init__(self, max_age: int = 10):
        self.max_age = max_age
        self.tracks: dict[int, FeatureTrack] = {}

    def update(self, frame: int, observations) -> dict[int, FeatureTrack]:
        if isinstance(observations, Mapping):
            items = [(int(k), v) for k, v in observations.items()]
        else:
            items = [(o.feature_id, (o.u, o.v)) for o in observations]
        ids = [k for k, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate feature ids in frame {frame}")
        seen = set(ids)
        for track in self.tracks.values():
            if track.feature_id not in seen:
                track.age += 1
        for fid, uv in items:
            track = self.tracks.get(fid)
            if track is None:
                track = self.tracks[fid] = FeatureTrack(fid)
            track.observations[frame] = (float(uv[0]), float(uv[1]))
            track.age = 0
        for fid in [k for k, t in self.tracks.items() if t.age >= self.max_age]:
            del self.tracks[fid]
        return self.tracks

    def drop_frame(self, frame: int) -> None:
        for fid in list(self.tracks):
            track = self.tracks[fid]
            track.observations.pop(frame, None)
            if track.anchor_frame == frame:
                track.anchor_frame = None
                track.inv_depth = None
            if not track.observations:
                del self.tracks[fid]

    def __len__(self) -> int:
        return len(self.tracks)


def camera_poses(states: Mapping[int, BodyState], cam: CameraModel) -> dict:
    """World-from-camera rotation and center per frame, as plain matrices."""
    out = {}
    for f, s in states.items():
        R = s.rotation_matrix
        out[f] = (R @ cam.R_bc, s.position + R @ cam.t_bc)
    return out


def triangulate(
    track: FeatureTrack,
    states: Mapping[int, BodyState],
    cam: CameraModel,
    min_parallax_px: float = 1.0,
    poses: Mapping | None = None,
) -> float:
    """Linear multi-view triangulation; returns inverse depth in the anchor camera.

    ``poses`` optionally caches :func:`camera_poses` when many tracks share a window.
    """
    frames = [f for f in track.frames if f in states]
    if len(frames) < 2:
        raise LowParallaxError("need two observations inside the window")
    anchor = track.anchor() if track.anchor() in states else frames[0]
    if poses is None:
        poses = camera_poses({f: states[f] for f in set(frames) | {anchor}}, cam)
    Rs = np.array([poses[f][0] for f in frames])
    centers = np.array([poses[f][1] for f in frames])
    rays = cam.ray(np.array([track.observations[f] for f in frames]))
    dirs = np.einsum("nij,nj->ni", Rs, rays)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
    parallax = float(np.arccos(cosines.min()))
    baseline = float(np.max(np.linalg.norm(centers[:, None] - centers[None], axis=-1)))
    if parallax * max(cam.fx, cam.fy) < min_parallax_px or baseline <= 1e-9:
        raise LowParallaxError(f"feature {track.feature_id}: parallax below {min_parallax_px} px")

    # DLT on normalized coordinates with camera-from-world [R^T | -R^T c]
    Rcw = np.transpose(Rs, (0, 2, 1))
    M = np.concatenate([Rcw, -np.einsum("nij,nj->ni", Rcw, centers)[:, :, None]], axis=2)
    rows = np.concatenate([rays[:, :1] * M[:, 2] - M[:, 0], rays[:, 1:2] * M[:, 2] - M[:, 1]])
    _, _, vt = np.linalg.svd(rows)
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise LowParallaxError(f"feature {track.feature_id}: point at infinity")
    p_w = X[:3] / X[3]
    Ra, ca = poses[anchor]
    depth = float((Ra.T @ (p_w - ca))[2])
    if depth <= 1e-6:
        raise TriangulationError(f"feature {track.feature_id}: triangulated behind the anchor camera")
    return 1.0 / depth


def reprojection_batch(
    Ra, pa, Rj, pj, rays, inv_depth, uv_obs, cam: CameraModel, jacobians: bool = True
):
    """Vectorized reprojection residuals.

    Shapes: rotations (n,3,3), positions (n,3), anchor rays (n,3), inverse
    depths (n,), observed pixels (n,2). Returns residual (n,2), depth in the
    observer camera (n,), and when requested Jacobians (n,2,13) ordered
    (anchor dp, anchor dtheta, observer dp, observer dtheta, d inv_depth).
    """
    R_bc, t_bc = cam.R_bc, cam.t_bc
    p_ca = rays / inv_depth[:, None]
    p_ba = p_ca @ R_bc.T + t_bc
    p_w = np.einsum("nij,nj->ni", Ra, p_ba) + pa
    p_bj = np.einsum("nji,nj->ni", Rj, p_w - pj)
    p_cj = (p_bj - t_bc) @ R_bc
    X, Y, Z = p_cj[:, 0], p_cj[:, 1], p_cj[:, 2]
    safe_z = np.where(np.abs(Z) > 1e-12, Z, 1e-12)
    r = np.stack([cam.fx * X / safe_z + cam.cx, cam.fy * Y / safe_z + cam.cy], axis=1) - uv_obs
    if not jacobians:
        return r, Z
    n = r.shape[0]
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = cam.fx / safe_z
    Jproj[:, 0, 2] = -cam.fx * X / safe_z**2
    Jproj[:, 1, 1] = cam.fy / safe_z
    Jproj[:, 1, 2] = -cam.fy * Y / safe_z**2
    # d p_cj / d p_w = R_bc^T Rj^T
    A = (Jproj @ R_bc.T) @ np.transpose(Rj, (0, 2, 1))
    J = np.empty((n, 2, 13))
    J[:, :, 0:3] = A
    J[:, :, 3:6] = -((A @ Ra) @ skew_batch(p_ba))
    J[:, :, 6:9] = -A
    J[:, :, 9:12] = (Jproj @ R_bc.T) @ skew_batch(p_bj)
    dpw_dlam = np.einsum("nij,nj->ni", Ra, (-rays / inv_depth[:, None] ** 2) @ R_bc.T)
    J[:, :, 12] = np.einsum("nik,nk->ni", A, dpw_dlam)
    return r, Z, J


def reprojection_residual(
    anchor_state: BodyState,
    observer_state: BodyState,
    inv_depth: float,
    anchor_uv,
    obs: FeatureObservation,
    cam: CameraModel,
):
    """Predicted minus observed pixel, with Jacobians w.r.t. both states (2x15) and inverse depth (2,)."""
    if not inv_depth > 0.0:
        raise CheiralityError("inverse depth must be positive")
    ray = cam.ray(np.asarray(anchor_uv, dtype=float))[None]
    r, Z, J = reprojection_batch(
        anchor_state.rotation_matrix[None],
        anchor_state.position[None],
        observer_state.rotation_matrix[None],
        observer_state.position[None],
        ray,
        np.array([float(inv_depth)]),
        obs.uv[None],
        cam,
    )
    if Z[0] <= 1e-6:
        raise CheiralityError(f"feature {obs.feature_id} behind camera of frame {obs.frame}")
    Ja = np.zeros((2, 15))
    Jo = np.zeros((2, 15))
    Ja[:, :6] = J[0, :, 0:6]
    Jo[:, :6] = J[0, :, 6:12]
    return r[0], Ja, Jo, J[0, :, 12].copy()


def huber(sq_norm: np.ndarray, delta: float):
    """Huber rho on squared norms and the sqrt(rho') row scaling used for IRLS."""
    sq_norm = np.asarray(sq_norm, dtype=float)
    d2 = delta * delta
    inside = sq_norm <= d2
    norm = np.sqrt(np.maximum(sq_norm, 1e-300))
    rho = np.where(inside, sq_norm, 2.0 * delta * norm - d2)
    scale = np.where(inside, 1.0, np.sqrt(delta / norm))
    return rho, scale
