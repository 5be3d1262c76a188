import numpy as np
import pytest

from walkvio.geometry import quat_exp, quat_multiply_array
from walkvio.marginalization import MarginalizationPrior, RankDeficiencyError, pseudo_inverse_psd, schur_complement


def spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


def test_schur_equals_marginal_covariance(rng):
    H, b = spd(rng, 12), rng.normal(size=12)
    marg, keep = np.arange(4), np.arange(4, 12)
    Hs, bs, deficit = schur_complement(H, b, marg, keep)
    assert deficit == 0
    # marginal information is the inverse of the kept block of the covariance
    assert np.allclose(Hs, np.linalg.inv(np.linalg.inv(H)[np.ix_(keep, keep)]))
    # the reduced system has the same solution on the kept variables
    assert np.allclose(np.linalg.solve(Hs, -bs), np.linalg.solve(H, -b)[keep])


def test_rank_deficiency_detected(rng):
    H = spd(rng, 6)
    H[:2, :] = 0.0
    H[:, :2] = 0.0
    inv, deficit = pseudo_inverse_psd(H[:3, :3])
    assert deficit == 2
    _, _, d = schur_complement(H, np.zeros(6), np.arange(3), np.arange(3, 6))
    assert d == 2
    with pytest.raises(RankDeficiencyError):
        schur_complement(H, np.zeros(6), np.arange(3), np.arange(3, 6), strict=True)


def _lin_point(rng, k):
    q = np.array([quat_exp(w).as_array() for w in rng.normal(size=(k, 3))])
    return rng.normal(size=(k, 3)), q, rng.normal(size=(k, 3)), rng.normal(size=(k, 3)), rng.normal(size=(k, 3))


def test_sqrt_factor_reproduces_information(rng):
    k = 2
    H, b = spd(rng, 15 * k), rng.normal(size=15 * k)
    prior = MarginalizationPrior.from_information((3, 4), *_lin_point(rng, k), H, b)
    assert np.allclose(prior.information, H)
    assert np.allclose(prior.information_vector, b)
    r, J = prior.evaluate(prior.lin_p, prior.lin_q, prior.lin_v, prior.lin_ba, prior.lin_bg)
    assert np.allclose(r, prior.r0) and np.allclose(J, prior.J0)


def test_prior_jacobian_matches_differences(rng):
    k = 2
    prior = MarginalizationPrior.from_information((0, 1), *_lin_point(rng, k), spd(rng, 15 * k), rng.normal(size=15 * k))
    p, q, v, ba, bg = (a.copy() for a in (prior.lin_p, prior.lin_q, prior.lin_v, prior.lin_ba, prior.lin_bg))
    q = quat_multiply_array(q, np.array([quat_exp(w).as_array() for w in rng.normal(size=(k, 3)) * 0.3]))
    _, J = prior.evaluate(p, q, v, ba, bg)

    def at(dx):
        d = dx.reshape(k, 15)
        dq = np.array([quat_exp(w).as_array() for w in d[:, 3:6]])
        return prior.evaluate(p + d[:, 0:3], quat_multiply_array(q, dq), v + d[:, 6:9], ba + d[:, 9:12], bg + d[:, 12:15])[0]

    h = 1e-6
    N = np.column_stack([(at(h * e) - at(-h * e)) / (2 * h) for e in np.eye(15 * k)])
    assert np.allclose(J, N, atol=1e-6 * np.abs(J).max())


def test_dropped_directions_are_not_kept(rng):
    A = rng.normal(size=(15, 10))
    H = A @ A.T  # rank 10
    prior = MarginalizationPrior.from_information((0,), *_lin_point(rng, 1), H, H @ rng.normal(size=15))
    assert prior.residual_dim == 10
    assert np.allclose(prior.information, H, atol=1e-8)
