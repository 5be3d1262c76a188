import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from walkvio.geometry import (
    BodyState,
    Pose,
    UnitQuaternion,
    boxminus,
    boxplus,
    canonical_quat_array,
    matrix_to_quat_array,
    quat_exp,
    quat_log,
    quat_to_matrix_array,
    right_jacobian,
    right_jacobian_batch,
    right_jacobian_inv,
    right_jacobian_inv_batch,
    skew,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_log_batch,
)

from conftest import random_state

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
# rotation vectors strictly inside the ball of radius pi, where log is unique
rotvec = vec3.map(lambda v: v if np.linalg.norm(v) < 3.0 else v * (3.0 / np.linalg.norm(v)))


@given(vec3, vec3)
def test_skew_is_cross_product(a, b):
    assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-9)
    assert np.allclose(skew(a), -skew(a).T)


@given(rotvec)
def test_exp_is_rotation_and_log_inverts(w):
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(so3_log(R), w, atol=1e-9)


def test_exp_small_angle_and_known_value():
    assert np.allclose(so3_exp(np.zeros(3)), np.eye(3))
    Rz = so3_exp([0.0, 0.0, np.pi / 2])
    assert np.allclose(Rz @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)
    tiny = np.array([1e-12, -2e-12, 3e-12])
    assert np.allclose(so3_log(so3_exp(tiny)), tiny, atol=1e-20)


@given(rotvec)
def test_quaternion_matrix_roundtrip(w):
    q = quat_exp(w)
    R = q.to_matrix()
    assert np.allclose(R, so3_exp(w), atol=1e-12)
    q2 = matrix_to_quat_array(R)
    assert q2[0] >= 0.0
    assert np.allclose(canonical_quat_array(q.as_array()), q2, atol=1e-12)
    assert np.allclose(quat_log(q), w, atol=1e-9)


@given(rotvec, vec3)
def test_quaternion_rotate_matches_matrix(w, v):
    q = quat_exp(w)
    assert np.allclose(q.rotate(v), q.to_matrix() @ v, atol=1e-9)


@given(rotvec)
def test_right_jacobian_first_order(w):
    # exp(w + d) = exp(w) exp(Jr(w) d) + O(|d|^2)
    d = np.array([1e-6, -2e-6, 1.5e-6])
    lhs = so3_exp(w + d)
    rhs = so3_exp(w) @ so3_exp(right_jacobian(w) @ d)
    assert np.allclose(lhs, rhs, atol=1e-10)
    assert np.allclose(right_jacobian_inv(w) @ right_jacobian(w), np.eye(3), atol=1e-8)


def test_batch_helpers_match_scalar(rng):
    W = rng.normal(size=(50, 3))
    W[0] = 0.0
    W[1] = 1e-10
    R = so3_exp_batch(W)
    assert np.allclose(R, [so3_exp(w) for w in W], atol=1e-14)
    assert np.allclose(so3_log_batch(R), [so3_log(r) for r in R], atol=1e-12)
    assert np.allclose(right_jacobian_batch(W), [right_jacobian(w) for w in W], atol=1e-13)
    assert np.allclose(right_jacobian_inv_batch(W), [right_jacobian_inv(w) for w in W], atol=1e-12)
    Q = quat_to_matrix_array(matrix_to_quat_array(R))
    assert np.allclose(Q, R, atol=1e-14)


def test_pose_compose_inverse(rng):
    a = Pose(quat_exp(rng.normal(size=3)), rng.normal(size=3))
    b = Pose(quat_exp(rng.normal(size=3)), rng.normal(size=3))
    assert a.compose(a.inverse()).isclose(Pose.identity())
    p = rng.normal(size=3)
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    M = a.as_matrix()
    assert np.allclose(M[:3, :3] @ p + M[:3, 3], a.apply(p))


def test_boxplus_boxminus_roundtrip(rng):
    for _ in range(20):
        s = random_state(rng)
        d = rng.normal(size=15) * 0.3
        assert np.allclose(boxminus(boxplus(s, d), s), d, atol=1e-9)


def test_body_state_is_immutable(rng):
    s = random_state(rng)
    with pytest.raises(ValueError):
        s.position[0] = 1.0
    assert BodyState.at_rest().orientation.as_array().tolist() == [1.0, 0.0, 0.0, 0.0]
    assert isinstance(UnitQuaternion.identity(), UnitQuaternion)
