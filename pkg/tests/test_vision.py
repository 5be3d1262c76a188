import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from walkvio.geometry import BodyState, boxplus, quat_exp
from walkvio.vision import (
    CameraModel,
    CheiralityError,
    FeatureObservation,
    FeatureTrack,
    LowParallaxError,
    TrackStore,
    TriangulationError,
    huber,
    reprojection_residual,
    triangulate,
)

from jacobians import worst_error

CAM = CameraModel()


def scene(rng, n_frames=4, baseline=0.3):
    s0 = BodyState(rng.normal(size=3), quat_exp(rng.normal(size=3) * 0.3), np.zeros(3), np.zeros(3), np.zeros(3))
    states = {0: s0}
    for k in range(1, n_frames):
        states[k] = boxplus(s0, np.r_[rng.normal(size=3) * baseline, rng.normal(size=3) * 0.03, np.zeros(9)])
    p_c = np.array([0.4, -0.3, 4.0])
    p_w = CAM.world_T_cam(s0).apply(p_c)
    return states, p_w, p_c


def observe(states, p_w):
    return {k: tuple(CAM.project(CAM.world_T_cam(s).inverse().apply(p_w))) for k, s in states.items()}


def test_project_ray_roundtrip():
    p = np.array([0.5, -0.2, 3.0])
    uv = CAM.project(p)
    assert np.allclose(CAM.ray(uv) * 3.0, p)
    assert CAM.in_image(np.array([320.0, 240.0])) and not CAM.in_image(np.array([-1.0, 0.0]))
    with pytest.raises(ValueError):
        CameraModel(fx=0.0)


def test_camera_looks_forward():
    # optical axis along body +x with the default mount
    assert np.allclose(CAM.R_bc[:, 2], [1.0, 0.0, 0.0])


def test_triangulation_exact_on_noiseless_views(rng):
    for _ in range(10):
        states, p_w, p_c = scene(rng)
        track = FeatureTrack(1, observe(states, p_w))
        assert triangulate(track, states, CAM) == pytest.approx(1.0 / p_c[2], rel=1e-9)


def test_triangulation_rejects_low_parallax(rng):
    states, p_w, _ = scene(rng)
    same = {k: states[0] for k in states}
    with pytest.raises(LowParallaxError):
        triangulate(FeatureTrack(1, observe(same, p_w)), same, CAM)
    with pytest.raises(LowParallaxError):
        triangulate(FeatureTrack(1, {0: (1.0, 2.0)}), states, CAM)
    assert issubclass(LowParallaxError, TriangulationError)


def test_residual_zero_at_truth_and_cheirality(rng):
    states, p_w, p_c = scene(rng)
    obs = observe(states, p_w)
    r, Ja, Jo, Jl = reprojection_residual(states[0], states[2], 1.0 / p_c[2], obs[0], FeatureObservation(1, 2, *obs[2]), CAM)
    assert np.allclose(r, 0.0, atol=1e-9)
    assert Ja.shape == Jo.shape == (2, 15) and Jl.shape == (2,)
    with pytest.raises(CheiralityError):
        reprojection_residual(states[0], states[2], -0.1, obs[0], FeatureObservation(1, 2, *obs[2]), CAM)


def test_analytic_jacobians():
    assert worst_error("reprojection", 10, seed=7) < 1e-5


@given(st.floats(0.0, 100.0), st.floats(0.1, 5.0))
def test_huber_rho_and_irls_weight(sq, delta):
    rho, scale = huber(np.array([sq]), delta)
    if sq <= delta * delta:
        assert rho[0] == pytest.approx(sq) and scale[0] == 1.0
    else:
        assert rho[0] == pytest.approx(2 * delta * np.sqrt(sq) - delta * delta)
        # IRLS weight squared is d rho / d |e|^2
        h = 1e-6 * sq
        drho = (huber(np.array([sq + h]), delta)[0] - huber(np.array([sq - h]), delta)[0]) / (2 * h)
        assert scale[0] ** 2 == pytest.approx(drho[0], rel=1e-5)
    assert rho[0] <= sq + 1e-12


def test_track_store_aging_and_frame_drop():
    store = TrackStore(max_age=2)
    store.update(0, {1: (1.0, 1.0), 2: (2.0, 2.0)})
    store.update(1, [FeatureObservation(1, 1, 1.5, 1.0)])
    assert set(store.tracks) == {1, 2}
    store.update(2, {1: (2.0, 1.0)})
    assert set(store.tracks) == {1}
    t = store.tracks[1]
    t.anchor_frame, t.inv_depth = 0, 0.25
    store.drop_frame(0)
    assert t.anchor_frame is None and t.inv_depth is None and t.frames == [1, 2]
    with pytest.raises(ValueError):
        store.update(3, [FeatureObservation(5, 3, 0, 0), FeatureObservation(5, 3, 1, 1)])
