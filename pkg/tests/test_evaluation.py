import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from walkvio.evaluation import EvaluationError, align_yaw, trajectory_error, umeyama
from walkvio.geometry import so3_exp


def helix(n=400):
    t = np.linspace(0.0, 20.0, n)
    p = np.column_stack([3 * np.cos(0.3 * t), 3 * np.sin(0.3 * t), 0.1 * t + 0.05 * np.sin(2 * t)])
    return t, p


def test_identity_is_zero():
    t, p = helix()
    rep = trajectory_error(t, p, t, p)
    assert rep.rmse == pytest.approx(0.0, abs=1e-12) and rep.max_error == pytest.approx(0.0, abs=1e-12)
    assert rep.matching == "exact" and len(rep) == len(t)


@pytest.mark.parametrize("align", ["se3", "posyaw"])
def test_shift_absorbed(align):
    t, p = helix()
    rep = trajectory_error(t, p + [1.0, 0.0, 0.0], t, p, align=align)
    assert rep.rmse < 1e-12
    assert np.allclose(rep.translation, [-1.0, 0.0, 0.0])


def test_no_alignment_keeps_offset():
    t, p = helix()
    assert trajectory_error(t, p + [0.0, 0.2, 0.0], t, p, align="none").rmse == pytest.approx(0.2)


def test_umeyama_recovers_transform(rng):
    _, p = helix()
    R, tr = so3_exp(rng.normal(size=3)), rng.normal(size=3)
    R_hat, t_hat = umeyama(p, p @ R.T + tr)
    assert np.allclose(R_hat, R, atol=1e-10) and np.allclose(t_hat, tr, atol=1e-10)
    Rz = so3_exp([0.0, 0.0, 1.1])
    R_hat, _ = align_yaw(p, p @ Rz.T)
    assert np.allclose(R_hat, Rz, atol=1e-10)


def test_noise_rmse_statistics():
    rng = np.random.default_rng(42)
    t = np.arange(10_000) * 0.01
    gt = np.column_stack([np.cos(0.01 * t), np.sin(0.01 * t), 0.01 * t]) * 10
    sigma = 0.05
    rep = trajectory_error(t, gt + rng.normal(0, sigma, gt.shape), t, gt)
    assert rep.rmse == pytest.approx(sigma * np.sqrt(3), rel=0.1)
    assert rep.rmse <= rep.max_error


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_invariant_under_common_rigid_transform(w, shift):
    rng = np.random.default_rng(0)
    t, gt = helix(200)
    est = gt + rng.normal(0, 0.05, gt.shape)
    R = so3_exp(w)
    a = trajectory_error(t, est, t, gt)
    b = trajectory_error(t, est @ R.T + shift, t, gt @ R.T + shift)
    assert b.rmse == pytest.approx(a.rmse, rel=1e-7, abs=1e-12)


def test_interpolates_when_timestamps_differ():
    t_gt = np.arange(0, 10.0001, 0.01)
    gt = np.column_stack([0.5 * t_gt, 0.1 * t_gt, np.zeros_like(t_gt)])
    t_est = np.arange(0.055, 9.9, 0.1)  # off the GT grid
    est = np.column_stack([0.5 * t_est, 0.1 * t_est, np.zeros_like(t_est)])
    rep = trajectory_error(t_est, est, t_gt, gt)
    assert rep.matching == "interpolated"
    assert rep.rmse < 1e-12
    assert rep.timestamps[0] >= t_est[0] and rep.timestamps[-1] <= t_est[-1]


def test_empty_overlap_and_bad_alignment():
    t, p = helix()
    with pytest.raises(EvaluationError, match="overlap"):
        trajectory_error(t + 100.0, p, t, p)
    with pytest.raises(EvaluationError):
        trajectory_error([], np.zeros((0, 3)), t, p)
    with pytest.raises(EvaluationError):
        trajectory_error(t, p, t, p, align="sim3")


def test_distance_bins_quartiles():
    t = np.arange(101, dtype=float)
    gt = np.column_stack([t * 0.1, np.zeros(101), np.zeros(101)])  # 10 m straight line
    err = np.linspace(0.0, 1.0, 101)
    est = gt + np.column_stack([np.zeros(101), np.zeros(101), err])
    rep = trajectory_error(t, est, t, gt, align="none", bin_length=5.0)
    assert [(b.start, b.end) for b in rep.bins] == [(0.0, 5.0), (5.0, 10.0)]
    first = err[:50]
    q1, med, q3 = np.percentile(first, [25, 50, 75])
    b = rep.bins[0]
    assert (b.count, b.q1, b.median, b.q3) == (50, pytest.approx(q1), pytest.approx(med), pytest.approx(q3))
    assert sum(b.count for b in rep.bins) == len(rep)
    assert rep.boxplot_csv().splitlines()[0].startswith("bin_start,bin_end,count,q1,median,q3")
    assert len(rep.series_csv().splitlines()) == len(rep) + 1
    text = rep.to_text()
    assert "rmse = " in text and "alignment = none" in text
