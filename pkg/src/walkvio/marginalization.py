"""Schur-complement elimination and the dense prior it leaves behind.

The prior is stored in square-root form: a residual ``r0 + J0 dx`` over the
retained frames, where ``dx`` is the manifold difference from the fixed
linearization point. ``J0^T J0`` is the marginal information and
``J0^T r0`` the information vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_log_array, quat_multiply_array, right_jacobian_inv_batch

EIGEN_EPS = 1e-8


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


def pseudo_inverse_psd(A: np.ndarray, eps: float = EIGEN_EPS):
    """Eigen pseudo-inverse of a symmetric PSD block; also returns the rank deficit."""
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    keep = w > eps
    inv = (V[:, keep] / w[keep]) @ V[:, keep].T
    return inv, int(np.count_nonzero(~keep))


def schur_complement(H: np.ndarray, b: np.ndarray, marg: np.ndarray, keep: np.ndarray, eps: float = EIGEN_EPS, strict: bool = False):
    """Eliminate ``marg`` from ``(H, b)``; returns ``(H', b', rank_deficit)``.

    ``b`` is the information vector ``J^T r``; the eliminated system keeps the
    same sign convention.
    """
    Hmm = H[np.ix_(marg, marg)]
    Hmk = H[np.ix_(marg, keep)]
    Hkk = H[np.ix_(keep, keep)]
    inv, deficit = pseudo_inverse_psd(Hmm, eps)
    if strict and deficit:
        raise RankDeficiencyError(f"eliminated block has {deficit} eigenvalue(s) below {eps:g}")
    K = Hmk.T @ inv
    Hs = Hkk - K @ Hmk
    bs = b[keep] - K @ b[marg]
    return 0.5 * (Hs + Hs.T), bs, deficit


@dataclass(frozen=True, eq=False)
class MarginalizationPrior:
    frame_ids: tuple  # retained frames, in column order
    lin_p: np.ndarray  # (k,3) linearization point
    lin_q: np.ndarray  # (k,4)
    lin_v: np.ndarray
    lin_ba: np.ndarray
    lin_bg: np.ndarray
    J0: np.ndarray  # (m, 15k)
    r0: np.ndarray  # (m,)

    @property
    def residual_dim(self) -> int:
        return int(self.r0.shape[0])

    @property
    def information(self) -> np.ndarray:
        return self.J0.T @ self.J0

    @property
    def information_vector(self) -> np.ndarray:
        return self.J0.T @ self.r0

    @classmethod
    def from_information(cls, frame_ids, p, q, v, ba, bg, H: np.ndarray, b: np.ndarray, eps: float = EIGEN_EPS):
        """Square-root factor of ``(H, b)`` keeping eigen-directions above ``eps``."""
        w, V = np.linalg.eigh(0.5 * (H + H.T))
        keep = w > eps
        s = np.sqrt(w[keep])
        J0 = s[:, None] * V[:, keep].T
        r0 = (V[:, keep].T @ b) / s
        return cls(tuple(frame_ids), *(np.array(a, dtype=float) for a in (p, q, v, ba, bg)), J0, r0)

    def delta(self, p, q, v, ba, bg):
        """Manifold difference from the linearization point, (k,15), and the rotation block Jacobians."""
        dq = quat_multiply_array(self.lin_q * np.array([1.0, -1.0, -1.0, -1.0]), q)
        dth = quat_log_array(dq)
        d = np.concatenate([p - self.lin_p, dth, v - self.lin_v, ba - self.lin_ba, bg - self.lin_bg], axis=1)
        jinv = right_jacobian_inv_batch(dth)
        return d, jinv

    def evaluate(self, p, q, v, ba, bg):
        """Residual and Jacobian w.r.t. the right-perturbation error state of the retained frames."""
        d, jinv = self.delta(p, q, v, ba, bg)
        r = self.r0 + self.J0 @ d.ravel()
        k = len(self.frame_ids)
        J = self.J0.copy().reshape(-1, k, 15)
        J[:, :, 3:6] = np.einsum("mka,kab->mkb", J[:, :, 3:6], jinv)
        return r, J.reshape(-1, 15 * k)
