"""Dense Levenberg-Marquardt on a manifold.

The problem object supplies three things: ``linearize(x)`` returning the cost
``F = sum(rho(|r|^2))`` with the Gauss-Newton normal equations ``H = J^T J``
and ``g = J^T r``, ``cost(x)`` for trial points, and ``retract(x, dx)``.
The linear model around ``x`` is ``F + 2 g.dx + dx.H.dx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Protocol

import numpy as np
import scipy.linalg


class Linearization(NamedTuple):
    cost: float
    H: np.ndarray
    g: np.ndarray


class Problem(Protocol):
    def linearize(self, x) -> Linearization: ...

    def cost(self, x) -> float: ...

    def retract(self, x, dx: np.ndarray): ...

    def norm(self, x) -> float: ...


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 10
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    function_tolerance: float = 1e-6
    initial_damping: float = 1e-4
    min_diagonal: float = 1e-6
    max_diagonal: float = 1e32


@dataclass
class SolveResult:
    x: Any
    cost: float
    initial_cost: float
    iterations: int
    reason: str
    accepted: int = 0
    costs: list = field(default_factory=list)  # cost after each accepted step

    @property
    def converged(self) -> bool:
        return self.reason in ("gradient", "step", "function")


def solve_damped(H: np.ndarray, g: np.ndarray, mu: float, min_diag: float = 1e-6, max_diag: float = 1e32) -> np.ndarray:
    """Solve ``(H + mu * D) dx = -g`` with ``D`` the clamped diagonal of ``H``."""
    A = H.copy()
    if mu > 0.0:
        d = np.clip(np.diag(H), min_diag, max_diag)
        A[np.diag_indices_from(A)] += mu * d
    try:
        factor = scipy.linalg.cho_factor(A, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, -g, rcond=None)[0]
    return scipy.linalg.cho_solve(factor, -g, check_finite=False)


def levenberg_marquardt(problem: Problem, x0, options: SolverOptions | None = None) -> SolveResult:
    opt = options or SolverOptions()
    x = x0
    lin = problem.linearize(x)
    F0 = F = lin.cost
    if not math.isfinite(F):
        return SolveResult(x, F, F, 0, "failed")
    mu, nu = opt.initial_damping, 2.0
    costs = []
    accepted = 0
    reason = "max_iterations"
    it = 0
    while it < opt.max_iterations:
        if lin.g.size == 0 or float(np.max(np.abs(lin.g))) < opt.gradient_tolerance:
            reason = "gradient"
            break
        it += 1
        dx = solve_damped(lin.H, lin.g, mu, opt.min_diagonal, opt.max_diagonal)
        if not np.all(np.isfinite(dx)):
            reason = "failed"
            break
        if np.linalg.norm(dx) <= opt.step_tolerance * (problem.norm(x) + opt.step_tolerance):
            reason = "step"
            break
        x_new = problem.retract(x, dx)
        F_new = problem.cost(x_new)
        predicted = -(2.0 * float(lin.g @ dx) + float(dx @ lin.H @ dx))
        rho = (F - F_new) / predicted if predicted > 0.0 else -1.0
        if math.isfinite(F_new) and F_new <= F and rho > 0.0:
            rel = (F - F_new) / F if F > 0.0 else 0.0
            x, F = x_new, F_new
            lin = problem.linearize(x)
            F = lin.cost
            costs.append(F)
            accepted += 1
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if rel < opt.function_tolerance:
                reason = "function"
                break
        else:
            mu = mu * nu if mu > 0.0 else max(opt.initial_damping, 1e-4)
            nu *= 2.0
    return SolveResult(x, F, F0, it, reason, accepted, costs)
