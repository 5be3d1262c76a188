import numpy as np
import pytest

from walkvio.geometry import BodyState, UnitQuaternion, quat_exp, so3_exp, so3_log
from walkvio.imu import (
    GRAVITY,
    ImuDataError,
    ImuNoise,
    PreintegrationBatch,
    delta_angle,
    imu_residual,
    imu_residual_arrays,
    imu_residual_batch,
    integrate,
    propagate,
)

from jacobians import relative_error, worst_error


def rows(n, dt, accel, gyro):
    t = np.arange(n) * dt
    return np.column_stack([t, np.tile(accel, (n, 1)), np.tile(gyro, (n, 1))])


def test_static_imu_deltas_closed_form():
    # at rest the accelerometer reads -g; deltas are integrals of a constant specific force
    T, n = 1.0, 101
    pre = integrate(rows(n, T / (n - 1), [0, 0, 9.81], [0, 0, 0]), np.zeros(6))
    assert pre.dt_total == pytest.approx(T)
    assert np.allclose(pre.delta_v, [0, 0, 9.81 * T], atol=1e-12)
    assert np.allclose(pre.delta_p, [0, 0, 0.5 * 9.81 * T * T], atol=1e-12)
    assert np.allclose(pre.delta_R, np.eye(3))


def test_constant_rate_rotation_exact():
    w = np.array([0.3, -0.2, 0.5])
    pre = integrate(rows(51, 0.01, [0, 0, 0], w), np.zeros(6))
    assert np.allclose(delta_angle(pre), w * 0.5, atol=1e-12)


def test_bias_is_subtracted():
    ba, bg = np.array([0.1, -0.2, 0.05]), np.array([0.01, 0.02, -0.03])
    raw = rows(41, 0.01, np.array([0, 0, 9.81]) + ba, bg)
    pre = integrate(raw, np.r_[ba, bg])
    ref = integrate(rows(41, 0.01, [0, 0, 9.81], [0, 0, 0]), np.zeros(6))
    assert np.allclose(pre.delta_p, ref.delta_p) and np.allclose(pre.delta_v, ref.delta_v)
    assert np.allclose(delta_angle(pre), 0.0, atol=1e-14)


def test_bias_jacobians_first_order(rng):
    raw = np.column_stack([np.arange(60) * 0.005, rng.normal(0, 2, (60, 3)), rng.normal(0, 1, (60, 3))])
    b0 = np.zeros(6)
    pre = integrate(raw, b0)
    db = np.r_[rng.normal(size=3) * 1e-4, rng.normal(size=3) * 1e-5]
    pert = pre.reintegrate(b0[:3] + db[:3], b0[3:] + db[3:])
    J = pre.bias_jacobians
    assert np.allclose(pert.delta_p, pre.delta_p + J[0:3] @ db, atol=1e-9)
    assert np.allclose(pert.delta_v, pre.delta_v + J[6:9] @ db, atol=1e-9)
    dth = so3_log(pre.delta_R.T @ pert.delta_R)
    assert np.allclose(dth, J[3:6] @ db, atol=1e-10)


def test_covariance_symmetric_positive_and_growing(rng):
    raw = np.column_stack([np.arange(100) * 0.01, rng.normal(0, 1, (100, 3)), rng.normal(0, 0.3, (100, 3))])
    short = integrate(raw[:30], np.zeros(6))
    full = integrate(raw, np.zeros(6))
    for pre in (short, full):
        assert np.allclose(pre.covariance, pre.covariance.T)
        assert np.all(np.linalg.eigvalsh(pre.covariance) > 0)
    assert np.all(np.diag(full.covariance) > np.diag(short.covariance))
    U = full.sqrt_information
    assert np.allclose(U.T @ U @ full.covariance, np.eye(15), atol=1e-6)


def test_merge_equals_joint_integration(rng):
    raw = np.column_stack([np.arange(40) * 0.01, rng.normal(0, 1, (40, 3)), rng.normal(0, 0.3, (40, 3))])
    a, b = integrate(raw[:20], np.zeros(6)), integrate(raw[19:], np.zeros(6))
    m, ref = a.merge(b), integrate(raw, np.zeros(6))
    assert np.allclose(m.delta_p, ref.delta_p) and np.allclose(m.delta_v, ref.delta_v)
    assert np.allclose(m.covariance, ref.covariance)


def test_residual_zero_at_propagated_state(rng):
    raw = np.column_stack([np.arange(30) * 0.01, rng.normal(0, 1, (30, 3)), rng.normal(0, 0.3, (30, 3))])
    pre = integrate(raw, np.zeros(6))
    si = BodyState(rng.normal(size=3), quat_exp(rng.normal(size=3)), rng.normal(size=3), np.zeros(3), np.zeros(3))
    sj = propagate(si, pre)
    r, _, _ = imu_residual(si, sj, pre)
    assert np.allclose(r, 0.0, atol=1e-12)


def test_analytic_jacobians(rng):
    assert worst_error("imu", 10, seed=5) < 1e-5


def test_batch_matches_scalar(rng):
    pres, args = [], []
    for _ in range(6):
        raw = np.column_stack([np.arange(20) * 0.01, rng.normal(0, 1, (20, 3)), rng.normal(0, 0.3, (20, 3))])
        pres.append(integrate(raw, rng.normal(size=6) * 0.01))
        Ri, Rj = so3_exp(rng.normal(size=3)), so3_exp(rng.normal(size=3))
        args.append([rng.normal(size=3), Ri, rng.normal(size=3), rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.01,
                     rng.normal(size=3), Rj, rng.normal(size=3), rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.01])
    stacked = [np.array([a[k] for a in args]) for k in range(10)]
    r, Ji, Jj = imu_residual_batch(*stacked, PreintegrationBatch.stack(pres), GRAVITY)
    for k, (a, pre) in enumerate(zip(args, pres)):
        rs, Jis, Jjs = imu_residual_arrays(*a, pre, GRAVITY)
        assert np.allclose(r[k], rs, atol=1e-12)
        assert relative_error(Ji[k], Jis) < 1e-12 and relative_error(Jj[k], Jjs) < 1e-12


def test_rejects_bad_streams():
    good = rows(10, 0.01, [0, 0, 9.81], [0, 0, 0])
    with pytest.raises(ImuDataError):
        integrate(good[:1], np.zeros(6))
    bad = good.copy()
    bad[5, 0] = bad[4, 0]
    with pytest.raises(ImuDataError, match="non-monotonic"):
        integrate(bad, np.zeros(6))
    gap = good.copy()
    gap[5:, 0] += 0.5
    with pytest.raises(ImuDataError, match="gap"):
        integrate(gap, np.zeros(6))
    with pytest.raises(ValueError):
        integrate(good, np.zeros(6), ImuNoise(accel=0.0))
    assert UnitQuaternion.identity().angle_to(UnitQuaternion.identity()) == 0.0
