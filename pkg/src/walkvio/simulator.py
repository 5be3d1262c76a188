"""Synthetic quadruped walking data: ground truth, IMU, joint encoders, features.

The body follows an analytic base path (square with smoothed corners, circle,
or figure-8) plus a periodic walking wobble: lateral sway along the path
normal and roll/pitch oscillation at the gait frequency. Feet follow a trot
schedule; stance feet are pinned to world points and joint angles come from
closed-form inverse kinematics, so a stance foot's world position is exactly
constant while it is in contact.

Motion-induced tracking error: each feature observation gets extra pixel noise
proportional to that feature's true image displacement since the previous
frame (``flow_noise_gain``). The dataset header only advertises the nominal
pixel noise, as a real camera datasheet would.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, DatasetHeader
from .geometry import matrix_to_quat_array
from .legs import LEG_IDS, LegModel, UnreachableError, default_legs, inverse_kinematics_batch
from .vision import CameraModel

PATHS = ("square", "circle", "figure8")
PRESETS = {
    # Champ-like and NMPC-like walking motion; only the ordering is meaningful
    "smooth": dict(sway=0.01, roll_amplitude=0.01, pitch_amplitude=0.01),
    "aggressive": dict(sway=0.04, roll_amplitude=0.05, pitch_amplitude=0.05),
}
DEFAULT_SCALE = {"square": 8.0, "circle": 3.0, "figure8": 3.5}
TROT_OFFSETS = {"LF": 0.0, "RH": 0.0, "RF": 0.5, "LH": 0.5}
GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class GaitConfig:
    path: str = "circle"
    scale: float = 0.0  # 0 selects the per-path default
    speed: float = 0.5
    duration: float = 60.0
    preset: str = "smooth"
    gait_period: float = 0.5
    duty_factor: float = 0.6
    sway: float = 0.01
    roll_amplitude: float = 0.01
    pitch_amplitude: float = 0.01
    body_height: float = 0.45
    swing_height: float = 0.08
    corner_radius: float = 1.0
    imu_rate: float = 100.0
    camera_rate: float = 10.0
    encoder_rate: float = 100.0
    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    accel_bias_walk: float = 1e-3
    gyro_bias_walk: float = 1e-4
    encoder_noise: float = 0.002
    pixel_noise: float = 1.0
    flow_noise_gain: float = 0.05
    feature_dropout: float = 0.02
    contact_corruption: float = 0.0
    landmark_count: int = 600
    landmark_min_offset: float = 1.5
    landmark_max_offset: float = 3.5
    landmark_max_height: float = 2.5
    max_features: int = 60
    max_depth: float = 12.0
    seed: int = 0

    @property
    def path_scale(self) -> float:
        return self.scale if self.scale > 0 else DEFAULT_SCALE[self.path]

    def validate(self) -> "GaitConfig":
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}; expected one of {PATHS}")
        if not 0.5 < self.duty_factor < 1.0:
            raise ValueError("duty factor must lie in (0.5, 1)")
        for name in ("imu_rate", "camera_rate", "encoder_rate", "gait_period", "duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        for rate in (self.imu_rate, self.encoder_rate):
            ratio = rate / self.camera_rate
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError("IMU and encoder rates must be integer multiples of the camera rate")
        return self

    def noiseless(self) -> "GaitConfig":
        return dataclasses.replace(
            self,
            accel_noise=0.0,
            gyro_noise=0.0,
            accel_bias_walk=0.0,
            gyro_bias_walk=0.0,
            encoder_noise=0.0,
            pixel_noise=0.0,
            flow_noise_gain=0.0,
            feature_dropout=0.0,
            contact_corruption=0.0,
        )


def preset_config(preset: str = "smooth", path: str = "circle", seed: int = 0, **overrides) -> GaitConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
    values = dict(PRESETS[preset], path=path, seed=seed, preset=preset)
    values.update(overrides)
    return dataclasses.replace(GaitConfig(), **values).validate()


# -- base paths ------------------------------------------------------------------


class PathDerivs(NamedTuple):
    p: np.ndarray  # (n, 2) and successive time derivatives
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray


class StaticPath:
    period = 1.0

    def derivs(self, t):
        z = np.zeros((len(t), 2))
        return PathDerivs(z, z.copy(), z.copy(), z.copy())


class CirclePath:
    def __init__(self, radius: float, speed: float):
        self.radius = radius
        self.omega = speed / radius
        self.period = 2 * math.pi / self.omega

    def derivs(self, t):
        r, w = self.radius, self.omega
        c, s = np.cos(w * t), np.sin(w * t)
        return PathDerivs(
            np.stack([r * c, r * s], 1),
            np.stack([-r * w * s, r * w * c], 1),
            np.stack([-r * w * w * c, -r * w * w * s], 1),
            np.stack([r * w**3 * s, -r * w**3 * c], 1),
        )


class Figure8Path:
    """Lemniscate of Gerono ``(a sin u, a/2 sin 2u)`` with ``u = omega t``; mean speed matches."""

    def __init__(self, half_width: float, speed: float):
        self.a = half_width
        u = np.linspace(0.0, 2 * math.pi, 20001)
        ds = np.hypot(half_width * np.cos(u), half_width * np.cos(2 * u))
        perimeter = float(np.sum(0.5 * (ds[1:] + ds[:-1]) * np.diff(u)))
        self.period = perimeter / speed
        self.omega = 2 * math.pi / self.period

    def derivs(self, t):
        a, w = self.a, self.omega
        u = w * t
        s1, c1, s2, c2 = np.sin(u), np.cos(u), np.sin(2 * u), np.cos(2 * u)
        return PathDerivs(
            np.stack([a * s1, 0.5 * a * s2], 1),
            np.stack([a * w * c1, a * w * c2], 1),
            np.stack([-a * w * w * s1, -2 * a * w * w * s2], 1),
            np.stack([-a * w**3 * c1, -4 * a * w**3 * c2], 1),
        )


def _hermite7(p0, v0, p1, v1, T):
    """Degree-7 polynomial coefficients (8, 2) matching position/velocity, zero accel and jerk at both ends."""
    M = np.zeros((8, 8))
    rhs = np.zeros((8, 2))
    for row, (tau, order) in enumerate([(0, 0), (0, 1), (0, 2), (0, 3), (T, 0), (T, 1), (T, 2), (T, 3)]):
        for k in range(order, 8):
            M[row, k] = math.factorial(k) / math.factorial(k - order) * tau ** (k - order)
    rhs[0], rhs[1], rhs[4], rhs[5] = p0, v0, p1, v1
    return np.linalg.solve(M, rhs)


class SquarePath:
    """Counter-clockwise square; straight sides joined by C3 polynomial corner blends."""

    def __init__(self, side: float, speed: float, corner: float = 1.0):
        if not 0 < corner < side / 2:
            raise ValueError("corner blend must be shorter than half a side")
        h = side / 2
        corners = [np.array(c, float) for c in ((h, -h), (h, h), (-h, h), (-h, -h))]
        dirs = [np.array(d, float) for d in ((1, 0), (0, 1), (-1, 0), (0, -1))]
        straight_T = (side - 2 * corner) / speed
        # blend time chosen so the corner speed stays close to nominal
        corner_T = 1.6 * corner / speed
        coefs, starts, durs = [], [], []
        t0 = 0.0
        for k in range(4):
            start = corners[k - 1] + corner * dirs[k]
            c = np.zeros((8, 2))
            c[0], c[1] = start, speed * dirs[k]
            coefs.append(c)
            starts.append(t0)
            durs.append(straight_T)
            t0 += straight_T
            nxt = dirs[(k + 1) % 4]
            coefs.append(_hermite7(corners[k] - corner * dirs[k], speed * dirs[k], corners[k] + corner * nxt, speed * nxt, corner_T))
            starts.append(t0)
            durs.append(corner_T)
            t0 += corner_T
        self.coefs = np.array(coefs)  # (segments, 8, 2)
        self.starts = np.array(starts)
        self.period = t0
        k = np.arange(8)
        self._d = [self.coefs]
        for _ in range(3):
            prev = self._d[-1]
            nxt = np.zeros_like(prev)
            nxt[:, :-1] = prev[:, 1:] * k[1:, None]
            self._d.append(nxt)

    def derivs(self, t):
        tm = np.mod(t, self.period)
        idx = np.clip(np.searchsorted(self.starts, tm, side="right") - 1, 0, len(self.starts) - 1)
        tau = tm - self.starts[idx]
        powers = tau[:, None] ** np.arange(8)[None, :]
        out = [np.einsum("nk,nkd->nd", powers, d[idx]) for d in self._d]
        return PathDerivs(*out)


def make_path(config: GaitConfig):
    if config.speed == 0:
        return StaticPath()
    scale = config.path_scale
    if config.path == "circle":
        return CirclePath(scale, config.speed)
    if config.path == "figure8":
        return Figure8Path(scale, config.speed)
    return SquarePath(scale, config.speed, config.corner_radius)


# -- body trajectory ---------------------------------------------------------------


class TrajectorySample(NamedTuple):
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    R: np.ndarray
    omega: np.ndarray  # body-frame angular rate
    yaw: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return matrix_to_quat_array(self.R)


def _heading(d: PathDerivs):
    x1, y1 = d.d1[:, 0], d.d1[:, 1]
    x2, y2 = d.d2[:, 0], d.d2[:, 1]
    x3, y3 = d.d3[:, 0], d.d3[:, 1]
    s2 = x1 * x1 + y1 * y1
    moving = s2 > 1e-18
    s2s = np.where(moving, s2, 1.0)
    yaw = np.where(moving, np.arctan2(y1, x1), 0.0)
    cross = x1 * y2 - y1 * x2
    yaw_d = np.where(moving, cross / s2s, 0.0)
    yaw_dd = np.where(moving, ((x1 * y3 - y1 * x3) * s2 - cross * 2 * (x1 * x2 + y1 * y2)) / s2s**2, 0.0)
    return yaw, yaw_d, yaw_dd


def _rot_zyx(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(yaw.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


class Trajectory:
    """Analytic body motion: base path plus walking wobble."""

    def __init__(self, config: GaitConfig):
        self.config = config
        self.path = make_path(config)
        self.freq = 1.0 / config.gait_period

    @property
    def lap_period(self) -> float:
        return self.path.period

    def base(self, t):
        """Planar base-path position (n,2) and heading (n,) without wobble."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        d = self.path.derivs(t)
        yaw, _, _ = _heading(d)
        return d.p, yaw

    def evaluate(self, t) -> TrajectorySample:
        cfg = self.config
        t = np.atleast_1d(np.asarray(t, dtype=float))
        d = self.path.derivs(t)
        yaw, yd, ydd = _heading(d)
        w = 2 * math.pi * self.freq
        ph = w * t
        s, sd, sdd = cfg.sway * np.sin(ph), cfg.sway * w * np.cos(ph), -cfg.sway * w * w * np.sin(ph)
        roll = cfg.roll_amplitude * np.sin(ph)
        roll_d = cfg.roll_amplitude * w * np.cos(ph)
        pitch = cfg.pitch_amplitude * np.cos(ph)
        pitch_d = -cfg.pitch_amplitude * w * np.sin(ph)

        tang = np.stack([np.cos(yaw), np.sin(yaw)], 1)
        nrm = np.stack([-np.sin(yaw), np.cos(yaw)], 1)
        n_d = -yd[:, None] * tang
        n_dd = -ydd[:, None] * tang - (yd * yd)[:, None] * nrm

        n = len(t)
        p = np.zeros((n, 3))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))
        p[:, :2] = d.p + s[:, None] * nrm
        p[:, 2] = cfg.body_height
        v[:, :2] = d.d1 + sd[:, None] * nrm + s[:, None] * n_d
        a[:, :2] = d.d2 + sdd[:, None] * nrm + 2 * sd[:, None] * n_d + s[:, None] * n_dd

        R = _rot_zyx(yaw, pitch, roll)
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        omega = np.stack(
            [roll_d - yd * sp, pitch_d * cr + yd * cp * sr, -pitch_d * sr + yd * cp * cr],
            axis=1,
        )
        return TrajectorySample(t, p, v, a, R, omega, yaw, roll, pitch)


def generate_trajectory(config: GaitConfig) -> Trajectory:
    return Trajectory(config.validate())


# -- gait --------------------------------------------------------------------------


@dataclass(eq=False)
class GaitSchedule:
    t: np.ndarray  # encoder timestamps
    contact: dict  # leg -> (n,) bool
    foot_world: dict  # leg -> (n,3)
    joint_angles: dict  # leg -> (n,3), noiseless


def time_grid(duration: float, rate: float) -> np.ndarray:
    n = int(round(duration * rate))
    return np.arange(n + 1) / rate


def _foothold(traj: Trajectory, leg: LegModel, t_mid: np.ndarray) -> np.ndarray:
    xy, yaw = traj.base(t_mid)
    nominal = np.array([leg.hip_offset[0], leg.hip_offset[1] + leg.side * leg.hip_length])
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros((len(t_mid), 3))
    out[:, 0] = xy[:, 0] + c * nominal[0] - s * nominal[1]
    out[:, 1] = xy[:, 1] + s * nominal[0] + c * nominal[1]
    return out


def foot_positions(config: GaitConfig, traj: Trajectory, leg: LegModel, t: np.ndarray):
    """World foot position and contact flag of one leg following the trot schedule."""
    T, duty = config.gait_period, config.duty_factor
    off = TROT_OFFSETS[leg.leg_id]
    x = t / T + off
    k = np.floor(x)
    phase = x - k
    stance = phase < duty
    start = _foothold(traj, leg, (k - off + 0.5 * duty) * T)
    nxt = _foothold(traj, leg, (k + 1 - off + 0.5 * duty) * T)
    tau = np.where(stance, 0.0, (phase - duty) / (1.0 - duty))
    blend = tau - np.sin(2 * math.pi * tau) / (2 * math.pi)
    foot = start + (nxt - start) * blend[:, None]
    foot[:, 2] = config.swing_height * 0.5 * (1 - np.cos(2 * math.pi * tau))
    foot[stance] = start[stance]
    return foot, stance


def schedule_gait(config: GaitConfig, traj: Trajectory, legs: dict | None = None) -> GaitSchedule:
    legs = legs or default_legs()
    t = time_grid(config.duration, config.encoder_rate)
    sample = traj.evaluate(t)
    contact, feet, angles = {}, {}, {}
    for leg_id in LEG_IDS:
        leg = legs[leg_id]
        foot, stance = foot_positions(config, traj, leg, t)
        body = np.einsum("nji,nj->ni", sample.R, foot - sample.p)
        try:
            q = inverse_kinematics_batch(leg, body)
        except UnreachableError as exc:
            raise UnreachableError(f"gait config unreachable: {exc}") from None
        contact[leg_id], feet[leg_id], angles[leg_id] = stance, foot, q
    return GaitSchedule(t, contact, feet, angles)


# -- world and sensors ----------------------------------------------------------------


@dataclass(eq=False)
class SimulatedWorld:
    landmarks: np.ndarray  # (M,3)


def make_world(config: GaitConfig, traj: Trajectory, rng: np.random.Generator) -> SimulatedWorld:
    """Landmarks in a band on both sides of the path, clear of the walkway."""
    dense_t = np.linspace(0.0, traj.lap_period, 2000, endpoint=False)
    dense_xy, _ = traj.base(dense_t)
    out = []
    want = config.landmark_count
    while len(out) < want:
        n = 2 * (want - len(out)) + 16
        tt = rng.uniform(0.0, traj.lap_period, n)
        side = rng.choice([-1.0, 1.0], n)
        off = rng.uniform(config.landmark_min_offset, config.landmark_max_offset, n)
        z = rng.uniform(0.2, config.landmark_max_height, n)
        xy, yaw = traj.base(tt)
        pts = np.stack([xy[:, 0] - side * off * np.sin(yaw), xy[:, 1] + side * off * np.cos(yaw), z], 1)
        d = np.min(np.linalg.norm(pts[:, None, :2] - dense_xy[None], axis=-1), axis=1)
        out.extend(pts[d >= 1.0])
    return SimulatedWorld(np.array(out[:want]))


@dataclass(eq=False)
class SimulationResult:
    config: GaitConfig
    trajectory: Trajectory
    world: SimulatedWorld
    gait: GaitSchedule
    dataset: Dataset
    true_bias: np.ndarray  # (n_imu, 6)
    true_obs_uv: np.ndarray  # noiseless pixels aligned with dataset.obs_uv


def make_header(config: GaitConfig, legs: dict, camera: CameraModel) -> DatasetHeader:
    return DatasetHeader(
        camera=dataclasses.replace(camera, pixel_std=config.pixel_noise),
        legs=legs,
        noise={
            "accel": config.accel_noise,
            "gyro": config.gyro_noise,
            "accel_bias_walk": config.accel_bias_walk,
            "gyro_bias_walk": config.gyro_bias_walk,
            "encoder": config.encoder_noise,
            "pixel": config.pixel_noise,
        },
        gravity=GRAVITY.copy(),
        rates={"imu": config.imu_rate, "camera": config.camera_rate, "encoder": config.encoder_rate},
        extras={
            "sim.path": config.path,
            "sim.preset": config.preset,
            "sim.seed": str(config.seed),
            "sim.duration": repr(float(config.duration)),
        },
    )


def synthesize_sensors(config: GaitConfig, traj: Trajectory, gait: GaitSchedule, world: SimulatedWorld, legs: dict, camera: CameraModel, rngs) -> SimulationResult:
    rng_imu, rng_bias, rng_enc, rng_contact, rng_pix, rng_sel, rng_drop = rngs

    # ground truth and IMU
    t_imu = time_grid(config.duration, config.imu_rate)
    gt = traj.evaluate(t_imu)
    n = len(t_imu)
    dt = 1.0 / config.imu_rate
    specific_force = np.einsum("nji,nj->ni", gt.R, gt.a - GRAVITY)
    walk = np.concatenate(
        [
            rng_bias.standard_normal((n, 3)) * config.accel_bias_walk * math.sqrt(dt),
            rng_bias.standard_normal((n, 3)) * config.gyro_bias_walk * math.sqrt(dt),
        ],
        axis=1,
    )
    walk[0] = 0.0
    bias = np.cumsum(walk, axis=0)
    white = rng_imu.standard_normal((n, 6)) * np.repeat(
        [config.accel_noise * math.sqrt(config.imu_rate), config.gyro_noise * math.sqrt(config.imu_rate)], 3
    )
    imu = np.column_stack([t_imu, specific_force + bias[:, :3] + white[:, :3], gt.omega + bias[:, 3:] + white[:, 3:]])
    quat = gt.q
    gt_rows = np.column_stack([t_imu, gt.p, quat, gt.v])

    # joint encoders and contact flags
    t_enc = gait.t
    m = len(t_enc)
    jnt_t = np.repeat(t_enc, 4)
    jnt_leg = np.tile(np.arange(4), m)
    jnt_q = np.empty((4 * m, 3))
    jnt_c = np.empty(4 * m, dtype=bool)
    for k, leg_id in enumerate(LEG_IDS):
        q = gait.joint_angles[leg_id] + rng_enc.standard_normal((m, 3)) * config.encoder_noise
        c = gait.contact[leg_id].copy()
        if config.contact_corruption > 0:
            flip = rng_contact.uniform(size=m) < config.contact_corruption
            c = np.where(flip, ~c, c)
        jnt_q[k::4] = q
        jnt_c[k::4] = c

    # camera frames and feature observations
    t_cam = time_grid(config.duration, config.camera_rate)
    cam_pose = traj.evaluate(t_cam)
    R_wc = cam_pose.R @ camera.R_bc
    p_wc = cam_pose.p + np.einsum("nij,j->ni", cam_pose.R, camera.t_bc)
    priority = rng_sel.permutation(len(world.landmarks))
    order = np.argsort(priority)
    selected: set[int] = set()
    prev_uv = None
    prev_ok = None
    of, ok_, ouv, otrue = [], [], [], []
    for f in range(len(t_cam)):
        pc = (world.landmarks - p_wc[f]) @ R_wc[f]
        z = pc[:, 2]
        front = z > 0.3
        uv = np.full((len(pc), 2), np.nan)
        uv[front] = camera.project(pc[front])
        vis = front & (z < config.max_depth) & camera.in_image(np.nan_to_num(uv, nan=-1.0))
        keep = {i for i in selected if vis[i]}
        room = config.max_features - len(keep)
        if room > 0:
            for i in order:
                if room == 0:
                    break
                if vis[i] and i not in keep:
                    keep.add(int(i))
                    room -= 1
        selected = keep
        ids = np.array(sorted(keep), dtype=int)
        flow = np.zeros(len(ids))
        if prev_uv is not None and len(ids):
            had = prev_ok[ids]
            flow[had] = np.linalg.norm(uv[ids[had]] - prev_uv[ids[had]], axis=1)
        noise = rng_pix.standard_normal((len(ids), 2)) * config.pixel_noise
        noise += rng_pix.standard_normal((len(ids), 2)) * (config.flow_noise_gain * flow)[:, None]
        dropped = rng_drop.uniform(size=len(ids)) < config.feature_dropout
        use = ~dropped
        of.append(np.full(int(use.sum()), f))
        ok_.append(ids[use])
        ouv.append(uv[ids[use]] + noise[use])
        otrue.append(uv[ids[use]])
        prev_uv, prev_ok = uv, front

    header = make_header(config, legs, camera)
    ds = Dataset(
        header=header,
        gt=gt_rows,
        imu=imu,
        jnt_t=jnt_t,
        jnt_leg=jnt_leg,
        jnt_q=jnt_q,
        jnt_contact=jnt_c,
        cam_t=t_cam,
        cam_id=np.arange(len(t_cam)),
        obs_frame=np.concatenate(of).astype(int),
        obs_feature=np.concatenate(ok_).astype(int),
        obs_uv=np.concatenate(ouv).reshape(-1, 2),
    )
    return SimulationResult(config, traj, world, gait, ds, bias, np.concatenate(otrue).reshape(-1, 2))


def simulate(config: GaitConfig, legs: dict | None = None, camera: CameraModel | None = None) -> SimulationResult:
    """Full synthetic run; identical configs give bitwise-identical output."""
    config = config.validate()
    legs = legs or default_legs()
    camera = camera or CameraModel()
    streams = np.random.SeedSequence(config.seed).spawn(8)
    rngs = [np.random.default_rng(s) for s in streams]
    traj = Trajectory(config)
    gait = schedule_gait(config, traj, legs)
    world = make_world(config, traj, rngs[7])
    return synthesize_sensors(config, traj, gait, world, legs, camera, rngs[:7])
