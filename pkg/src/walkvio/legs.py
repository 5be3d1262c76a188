"""3-DOF leg forward/inverse kinematics and the stance-anchored leg residual.

Joint chain per leg: abduction about body x, then hip flexion and knee about
the leg's y axis. Positive flexion/knee angles swing the distal link toward
+x. ``hip_offset`` is the hip-flexion joint at zero abduction, so the zero
configuration puts the foot straight below it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BodyState, skew

LEG_IDS = ("LF", "RF", "LH", "RH")
INFO_REGULARIZER = 1e-9  # m^2


class ContactError(ValueError):
    """A leg residual was requested for a leg not in stance in both frames."""


class UnreachableError(ValueError):
    """Inverse kinematics target outside the leg workspace."""


@dataclass(frozen=True, eq=False)
class LegModel:
    leg_id: str
    hip_offset: np.ndarray
    hip_length: float
    thigh_length: float
    shank_length: float
    joint_limits: np.ndarray = field(
        default_factory=lambda: np.array([[-0.8, 0.8], [-2.0, 2.0], [-2.8, 2.8]])
    )

    def __post_init__(self):
        if self.leg_id not in LEG_IDS:
            raise ValueError(f"unknown leg id {self.leg_id!r}")
        if min(self.hip_length, self.thigh_length, self.shank_length) <= 0.0:
            raise ValueError("link lengths must be positive")
        object.__setattr__(self, "hip_offset", np.array(self.hip_offset, dtype=float).reshape(3))
        object.__setattr__(self, "joint_limits", np.array(self.joint_limits, dtype=float).reshape(3, 2))

    @property
    def side(self) -> float:
        return 1.0 if self.leg_id[0] == "L" else -1.0

    @property
    def abduction_origin(self) -> np.ndarray:
        return self.hip_offset - np.array([0.0, self.side * self.hip_length, 0.0])

    @property
    def reach(self) -> float:
        return self.hip_length + self.thigh_length + self.shank_length

    def within_limits(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        lim = self.joint_limits
        return bool(np.all(theta >= lim[:, 0]) and np.all(theta <= lim[:, 1]))


def default_legs() -> dict[str, LegModel]:
    """ANYmal-sized leg set used by the simulator presets."""
    legs = {}
    for leg_id in LEG_IDS:
        x = 0.3 if leg_id[1] == "F" else -0.3
        y = 0.2 if leg_id[0] == "L" else -0.2
        legs[leg_id] = LegModel(leg_id, np.array([x, y, 0.0]), 0.08, 0.28, 0.30)
    return legs


@dataclass(frozen=True, eq=False)
class LegSnapshot:
    timestamp: float
    leg_id: str
    joint_angles: np.ndarray
    contact: bool
    encoder_noise_std: float = 0.002

    def __post_init__(self):
        object.__setattr__(self, "joint_angles", np.array(self.joint_angles, dtype=float).reshape(3))
        object.__setattr__(self, "contact", bool(self.contact))


def _chain(model: LegModel, theta: np.ndarray):
    """Foot positions (n,3) and Jacobians (n,3,3) for joint angles (n,3)."""
    q1, q2, q3 = theta[:, 0], theta[:, 1], theta[:, 2]
    q23 = q2 + q3
    n = theta.shape[0]
    lt, ls = model.thigh_length, model.shank_length
    # leg-plane vector before abduction
    u = np.empty((n, 3))
    u[:, 0] = lt * np.sin(q2) + ls * np.sin(q23)
    u[:, 1] = model.side * model.hip_length
    u[:, 2] = -lt * np.cos(q2) - ls * np.cos(q23)
    du2 = np.zeros((n, 3))
    du2[:, 0] = lt * np.cos(q2) + ls * np.cos(q23)
    du2[:, 2] = lt * np.sin(q2) + ls * np.sin(q23)
    du3 = np.zeros((n, 3))
    du3[:, 0] = ls * np.cos(q23)
    du3[:, 2] = ls * np.sin(q23)

    c, s = np.cos(q1), np.sin(q1)

    def rot_x(vec):
        return np.stack([vec[:, 0], c * vec[:, 1] - s * vec[:, 2], s * vec[:, 1] + c * vec[:, 2]], axis=1)

    foot = model.abduction_origin + rot_x(u)
    J = np.empty((n, 3, 3))
    J[:, :, 0] = np.stack([np.zeros(n), -s * u[:, 1] - c * u[:, 2], c * u[:, 1] - s * u[:, 2]], axis=1)
    J[:, :, 1] = rot_x(du2)
    J[:, :, 2] = rot_x(du3)
    return foot, J


def forward_kinematics(model: LegModel, theta):
    """Foot position in the body frame and its 3x3 Jacobian w.r.t. the joint angles."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("joint angles must be finite")
    foot, J = _chain(model, theta.reshape(1, 3))
    return foot[0], J[0]


def forward_kinematics_batch(model: LegModel, thetas: np.ndarray):
    return _chain(model, np.asarray(thetas, dtype=float).reshape(-1, 3))


def inverse_kinematics_batch(model: LegModel, targets: np.ndarray) -> np.ndarray:
    """Closed-form joint angles (knee bent backward, q3 <= 0) reaching body-frame targets."""
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    r = targets - model.abduction_origin
    lh, lt, ls = model.hip_length, model.thigh_length, model.shank_length
    d_yz2 = r[:, 1] ** 2 + r[:, 2] ** 2
    if np.any(d_yz2 < lh * lh):
        raise UnreachableError(f"{model.leg_id}: target inside the abduction offset")
    lz = -np.sqrt(d_yz2 - lh * lh)
    ly = model.side * lh
    q1 = np.arctan2(r[:, 2], r[:, 1]) - np.arctan2(lz, ly)
    q1 = (q1 + np.pi) % (2 * np.pi) - np.pi
    x = r[:, 0]
    d2 = x * x + lz * lz
    cos_knee = (d2 - lt * lt - ls * ls) / (2.0 * lt * ls)
    if np.any(np.abs(cos_knee) > 1.0):
        raise UnreachableError(f"{model.leg_id}: target beyond leg reach")
    q3 = -np.arccos(cos_knee)
    q2 = np.arctan2(x, -lz) - np.arctan2(ls * np.sin(q3), lt + ls * np.cos(q3))
    return np.stack([q1, q2, q3], axis=1)


def inverse_kinematics(model: LegModel, target) -> np.ndarray:
    return inverse_kinematics_batch(model, target)[0]


def leg_residual_arrays(pi, Ri, pj, Rj, s_i, s_j):
    """Residual (3,) and Jacobians (3x6 each) w.r.t. (dp, dtheta) of frames i and j."""
    w = Ri @ s_i + pi - pj
    RjT_w = Rj.T @ w
    r = s_j - RjT_w
    Ji = np.empty((3, 6))
    Jj = np.empty((3, 6))
    Ji[:, 0:3] = -Rj.T
    Ji[:, 3:6] = Rj.T @ Ri @ skew(s_i)
    Jj[:, 0:3] = Rj.T
    Jj[:, 3:6] = -skew(RjT_w)
    return r, Ji, Jj


def leg_residual(state_i: BodyState, state_j: BodyState, snap_i: LegSnapshot, snap_j: LegSnapshot, model: LegModel):
    """Stance-anchored residual ``s_j - R_j^T (R_i s_i + t_i - t_j)`` in frame j.

    Returns ``(r, J_i, J_j)`` with 3x15 Jacobians over the full error states.
    """
    if not (snap_i.contact and snap_j.contact):
        raise ContactError(f"leg {model.leg_id} is not in contact in both frames")
    if snap_i.leg_id != model.leg_id or snap_j.leg_id != model.leg_id:
        raise ValueError("snapshot leg ids do not match the model")
    s_i, _ = forward_kinematics(model, snap_i.joint_angles)
    s_j, _ = forward_kinematics(model, snap_j.joint_angles)
    r, Ji6, Jj6 = leg_residual_arrays(
        state_i.position, state_i.rotation_matrix, state_j.position, state_j.rotation_matrix, s_i, s_j
    )
    Ji = np.zeros((3, 15))
    Jj = np.zeros((3, 15))
    Ji[:, :6] = Ji6
    Jj[:, :6] = Jj6
    return r, Ji, Jj


def foot_covariance(model: LegModel, theta, encoder_noise_std: float) -> np.ndarray:
    _, J = forward_kinematics(model, theta)
    return (encoder_noise_std**2) * (J @ J.T)


def encoder_information(model: LegModel, theta, encoder_noise_std: float) -> np.ndarray:
    """First-order information of the FK foot position under joint-encoder noise."""
    if not encoder_noise_std > 0.0:
        raise ValueError("encoder noise std must be positive")
    cov = foot_covariance(model, theta, encoder_noise_std) + INFO_REGULARIZER * np.eye(3)
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)
