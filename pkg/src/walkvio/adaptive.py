"""Walking-motion adaptive weighting of the leg kinematic residual.

Per-frame mean feature displacement is collected over the sliding window,
its scatter is eigen-decomposed, and the resulting square-root factor scales
the leg residual in the body y/z plane (image x/y map to body y/z through the
forward-looking camera).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SIGMA_REF_SQ = 4.0  # px^2
DEFAULT_GAMMA_MIN = 0.5
DEFAULT_GAMMA_MAX = 5.0


class DegenerateWindowError(ValueError):
    """Fewer than two valid frame motions in the window."""


@dataclass(frozen=True)
class FrameMotion:
    frame: int
    dx: float
    dy: float
    n: int

    @property
    def valid(self) -> bool:
        return self.n >= 1


@dataclass(frozen=True, eq=False)
class AdaptiveFactor:
    gamma: np.ndarray
    eigenvalues: np.ndarray  # (1, l1, l2) after normalization and clamping
    raw_eigenvalues: np.ndarray  # (l1, l2) normalized, before clamping
    window_size: int

    @property
    def gamma_eigenvalues(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)


def identity_factor(window_size: int = 0) -> AdaptiveFactor:
    return AdaptiveFactor(np.eye(3), np.ones(3), np.ones(2), window_size)


def fixed_factor(value: float = 1.0, window_size: int = 0) -> AdaptiveFactor:
    """Constant factor ``diag(1, value, value)``; body-x weight stays 1 as in the adaptive case."""
    value = float(value)
    if not value > 0.0:
        raise ValueError("fixed factor must be positive")
    return AdaptiveFactor(
        np.diag([1.0, value, value]),
        np.array([1.0, value * value, value * value]),
        np.array([value * value, value * value]),
        window_size,
    )


def frame_motion(prev_obs: Mapping[int, Sequence[float]], curr_obs: Mapping[int, Sequence[float]], frame: int = 0) -> FrameMotion:
    """Mean pixel displacement of the features seen in both frames."""
    common = sorted(set(prev_obs).intersection(curr_obs))
    if not common:
        return FrameMotion(frame, 0.0, 0.0, 0)
    prev = np.array([prev_obs[k] for k in common], dtype=float)
    curr = np.array([curr_obs[k] for k in common], dtype=float)
    d = (curr - prev).sum(axis=0) / len(common)
    return FrameMotion(frame, float(d[0]), float(d[1]), len(common))


def motion_covariance(motions: Sequence[FrameMotion]) -> np.ndarray:
    """3x3 matrix with 1 in the body-x slot and the scatter of mean motion below it."""
    valid = [m for m in motions if m.valid]
    if len(valid) < 2:
        raise DegenerateWindowError(f"need at least 2 valid frame motions, got {len(valid)}")
    d = np.array([(m.dx, m.dy) for m in valid])
    centered = d - d.mean(axis=0)
    scatter = centered.T @ centered
    C = np.zeros((3, 3))
    C[0, 0] = 1.0
    C[1:, 1:] = scatter
    return C


def compute_gamma(
    C: np.ndarray,
    sigma_ref_sq: float = DEFAULT_SIGMA_REF_SQ,
    gamma_min: float = DEFAULT_GAMMA_MIN,
    gamma_max: float = DEFAULT_GAMMA_MAX,
    window_size: int = 0,
) -> AdaptiveFactor:
    """Symmetric square-root factor from the eigen-decomposition of the scatter block.

    Eigenvalues come out principal-first.
    """
    C = np.asarray(C, dtype=float)
    if not sigma_ref_sq > 0.0:
        raise ValueError("sigma_ref_sq must be positive")
    if not 0.0 < gamma_min <= gamma_max:
        raise ValueError("need 0 < gamma_min <= gamma_max")
    block = 0.5 * (C[1:, 1:] + C[1:, 1:].T)
    evals, evecs = np.linalg.eigh(block)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    raw = np.maximum(evals, 0.0) / sigma_ref_sq
    clamped = np.clip(raw, gamma_min**2, gamma_max**2)
    P = np.eye(3)
    P[1:, 1:] = evecs
    gamma = P @ np.diag(np.concatenate([[1.0], np.sqrt(clamped)])) @ P.T
    gamma = 0.5 * (gamma + gamma.T)
    return AdaptiveFactor(gamma, np.concatenate([[1.0], clamped]), raw, window_size)


def window_factor(
    motions: Sequence[FrameMotion],
    sigma_ref_sq: float = DEFAULT_SIGMA_REF_SQ,
    gamma_min: float = DEFAULT_GAMMA_MIN,
    gamma_max: float = DEFAULT_GAMMA_MAX,
) -> AdaptiveFactor:
    """Factor for the current window, falling back to identity when degenerate."""
    try:
        C = motion_covariance(motions)
    except DegenerateWindowError:
        return identity_factor(len(motions))
    return compute_gamma(C, sigma_ref_sq, gamma_min, gamma_max, window_size=len(motions))


def weighted_leg_residual(r, factor: AdaptiveFactor | np.ndarray) -> np.ndarray:
    gamma = factor.gamma if isinstance(factor, AdaptiveFactor) else np.asarray(factor)
    return gamma @ np.asarray(r, dtype=float)


def reweighted_information(omega: np.ndarray, factor: AdaptiveFactor | np.ndarray) -> np.ndarray:
    """``Gamma^T Omega Gamma``, the information matrix equivalent of the weighted residual."""
    gamma = factor.gamma if isinstance(factor, AdaptiveFactor) else np.asarray(factor)
    out = gamma.T @ omega @ gamma
    return 0.5 * (out + out.T)
