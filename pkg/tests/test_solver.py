import numpy as np

from walkvio.solver import Linearization, SolverOptions, levenberg_marquardt, solve_damped


class Euclidean:
    """Residual function on R^n with its Jacobian."""

    def __init__(self, f, jac):
        self.f, self.jac = f, jac

    def linearize(self, x):
        r, J = self.f(x), self.jac(x)
        return Linearization(float(r @ r), J.T @ J, J.T @ r)

    def cost(self, x):
        r = self.f(x)
        return float(r @ r)

    def retract(self, x, dx):
        return x + dx

    def norm(self, x):
        return float(np.linalg.norm(x))


def rosenbrock():
    return Euclidean(
        lambda x: np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]]),
        lambda x: np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]]),
    )


def test_rosenbrock_converges():
    res = levenberg_marquardt(rosenbrock(), np.array([-1.2, 1.0]), SolverOptions(max_iterations=100, function_tolerance=1e-14))
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert all(b <= a for a, b in zip([res.initial_cost] + res.costs, res.costs))


def test_linear_problem_matches_lstsq(rng):
    A, b = rng.normal(size=(30, 5)), rng.normal(size=30)
    prob = Euclidean(lambda x: A @ x - b, lambda x: A)
    res = levenberg_marquardt(prob, np.zeros(5), SolverOptions(max_iterations=20, initial_damping=0.0))
    assert np.allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-10)
    assert res.reason in ("gradient", "function", "step")


def test_iteration_cap_and_failure():
    res = levenberg_marquardt(rosenbrock(), np.array([-1.2, 1.0]), SolverOptions(max_iterations=2, function_tolerance=0.0))
    assert res.reason == "max_iterations" and res.iterations == 2 and not res.converged
    nan = Euclidean(lambda x: np.array([np.nan]), lambda x: np.ones((1, 1)))
    assert levenberg_marquardt(nan, np.zeros(1)).reason == "failed"


def test_zero_gradient_stops_immediately():
    prob = Euclidean(lambda x: x - 1.0, lambda x: np.eye(2))
    res = levenberg_marquardt(prob, np.ones(2))
    assert res.reason == "gradient" and res.iterations == 0


def test_solve_damped_matches_dense(rng):
    A = rng.normal(size=(8, 8))
    H, g = A @ A.T, rng.normal(size=8)
    D = np.diag(np.clip(np.diag(H), 1e-6, 1e32))
    assert np.allclose(solve_damped(H, g, 0.3), np.linalg.solve(H + 0.3 * D, -g))
    # singular system falls back to least squares
    Hs = np.zeros((2, 2))
    assert np.all(np.isfinite(solve_damped(Hs, np.ones(2), 0.0)))
