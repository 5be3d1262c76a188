"""Central-difference oracles for the residual Jacobians.

Each ``*_case`` draws a random linearization point and returns a list of
(analytic, numeric) Jacobian pairs. States are perturbed with the same
right-perturbation retraction the estimator uses, so the comparison is on
the error state (dp, dtheta, dv, dba, dbg).
"""

import numpy as np

from walkvio.geometry import BodyState, boxplus, quat_exp
from walkvio.imu import ImuNoise, imu_residual, integrate
from walkvio.legs import LegSnapshot, default_legs, leg_residual
from walkvio.vision import CameraModel, FeatureObservation, reprojection_residual

STEP = 1e-6


def state_jacobian(f, state: BodyState, h: float = STEP) -> np.ndarray:
    cols = []
    for k in range(15):
        d = np.zeros(15)
        d[k] = h
        cols.append((f(boxplus(state, d)) - f(boxplus(state, -d))) / (2.0 * h))
    return np.column_stack(cols)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Frobenius error relative to the Jacobian scale (floored at 1 for near-zero blocks)."""
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1.0))


def _state(rng, pos_scale=1.0):
    return BodyState(
        rng.normal(size=3) * pos_scale,
        quat_exp(rng.normal(size=3)),
        rng.normal(size=3),
        rng.normal(size=3) * 0.1,
        rng.normal(size=3) * 0.01,
    )


def imu_case(rng):
    n = int(rng.integers(5, 30))
    t = np.cumsum(np.r_[0.0, rng.uniform(0.004, 0.012, n - 1)])
    rows = np.column_stack([t, rng.normal(0, 2, (n, 3)) + [0, 0, 9.81], rng.normal(0, 0.5, (n, 3))])
    pre = integrate(rows, rng.normal(size=6) * [0.1, 0.1, 0.1, 0.01, 0.01, 0.01], ImuNoise())
    si, sj = _state(rng), _state(rng)
    # bias near the linearization point so the first-order correction is exercised
    si = si.replace(accel_bias=pre.accel_bias + rng.normal(size=3) * 0.02, gyro_bias=pre.gyro_bias + rng.normal(size=3) * 0.002)
    _, Ji, Jj = imu_residual(si, sj, pre)
    Ni = state_jacobian(lambda s: imu_residual(s, sj, pre)[0], si)
    Nj = state_jacobian(lambda s: imu_residual(si, s, pre)[0], sj)
    return [(Ji, Ni), (Jj, Nj)]


def leg_case(rng):
    legs = default_legs()
    leg = list(legs)[int(rng.integers(4))]
    model = legs[leg]
    th_i = np.array([0.0, 0.6, -1.2]) + rng.normal(size=3) * 0.2
    th_j = np.array([0.0, 0.6, -1.2]) + rng.normal(size=3) * 0.2
    snap_i = LegSnapshot(0.0, leg, th_i, True)
    snap_j = LegSnapshot(0.1, leg, th_j, True)
    si, sj = _state(rng), _state(rng)
    _, Ji, Jj = leg_residual(si, sj, snap_i, snap_j, model)
    Ni = state_jacobian(lambda s: leg_residual(s, sj, snap_i, snap_j, model)[0], si)
    Nj = state_jacobian(lambda s: leg_residual(si, s, snap_i, snap_j, model)[0], sj)
    return [(Ji, Ni), (Jj, Nj)]


def reprojection_case(rng, cam: CameraModel | None = None):
    cam = cam or CameraModel()
    anchor = _state(rng)
    Twc = cam.world_T_cam(anchor)
    depth = rng.uniform(2.0, 8.0)
    p_c = np.array([rng.uniform(-0.5, 0.5) * depth, rng.uniform(-0.4, 0.4) * depth, depth])
    p_w = Twc.apply(p_c)
    anchor_uv = cam.project(p_c)
    d = np.concatenate([rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.05, np.zeros(9)])
    observer = boxplus(anchor, d)
    p_o = cam.world_T_cam(observer).inverse().apply(p_w)
    obs = FeatureObservation(7, 1, *(cam.project(p_o) + rng.normal(size=2) * 2.0))
    lam = 1.0 / depth

    def res(a, o, l):
        return reprojection_residual(a, o, l, anchor_uv, obs, cam)[0]

    _, Ja, Jo, Jl = reprojection_residual(anchor, observer, lam, anchor_uv, obs, cam)
    Na = state_jacobian(lambda s: res(s, observer, lam), anchor)
    No = state_jacobian(lambda s: res(anchor, s, lam), observer)
    h = STEP * lam
    Nl = (res(anchor, observer, lam + h) - res(anchor, observer, lam - h)) / (2.0 * h)
    return [(Ja, Na), (Jo, No), (Jl[:, None], Nl[:, None])]


CASES = {"imu": imu_case, "leg": leg_case, "reprojection": reprojection_case}


def worst_error(kind: str, count: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        for a, n in CASES[kind](rng):
            worst = max(worst, relative_error(a, n))
    return worst


__all__ = ["CASES", "relative_error", "state_jacobian", "worst_error"]
