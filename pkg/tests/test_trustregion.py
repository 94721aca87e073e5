import numpy as np
import pytest

from surprise_rl.numkit import NonFiniteError
from surprise_rl.trustregion import (
    DegenerateDirectionError, TrustRegionConfig, TrustRegionProblem, analytic_step,
    backtrack_coefficients, conjugate_gradient, solve_step,
)


def quadratic_problem(g, A, delta, theta_old=None):
    g = np.asarray(g, float)
    theta_old = np.zeros_like(g) if theta_old is None else theta_old

    def eval_fn(theta):
        d = theta - theta_old
        return float(g @ d), float(0.5 * d @ A @ d)

    return TrustRegionProblem(lambda: g, lambda idx, v: A @ v, eval_fn, theta_old, delta)


def random_spd(rng, n):
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


def test_cg_identity_one_iteration(rng):
    g = rng.standard_normal(6)
    x, res = conjugate_gradient(lambda v: v, g, 1)
    np.testing.assert_allclose(x, g)
    assert res < 1e-12


def test_cg_dense_oracle(rng):
    A = random_spd(rng, 20)
    g = rng.standard_normal(20)
    x, _ = conjugate_gradient(lambda v: A @ v, g, 20)
    np.testing.assert_allclose(x, np.linalg.solve(A, g), atol=1e-8)


def test_cg_zero_rhs():
    x, _ = conjugate_gradient(lambda v: v, np.zeros(3), 5)
    assert np.all(x == 0)


def test_cg_damping(rng):
    A = random_spd(rng, 5)
    g = rng.standard_normal(5)
    x, _ = conjugate_gradient(lambda v: A @ v, g, 5, damping=0.3)
    np.testing.assert_allclose(x, np.linalg.solve(A + 0.3 * np.eye(5), g), atol=1e-10)


def test_cg_non_finite():
    with pytest.raises(NonFiniteError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3), 3)


def test_analytic_step_examples():
    np.testing.assert_allclose(analytic_step(np.array([1.0, 0]), np.array([1.0, 0]), 0.5), [1, 0])
    g = np.array([0.3, -0.4])
    a = analytic_step(g, g, 0.1)
    b = analytic_step(5 * g, 5 * g, 0.1)
    np.testing.assert_allclose(a, b)
    assert np.linalg.norm(analytic_step(g, g, 1e-12)) < 1e-5
    with pytest.raises(DegenerateDirectionError):
        analytic_step(np.zeros(2), np.zeros(2), 0.1)


def test_solve_step_quadratic_oracle():
    theta, rep = solve_step(quadratic_problem([3.0, 4.0], np.eye(2), 0.02))
    assert rep.accepted and rep.backtracks_used == 0
    assert rep.step_norm == pytest.approx(0.2, rel=1e-4)
    np.testing.assert_allclose(theta / np.linalg.norm(theta), [0.6, 0.8])
    assert rep.constraint_after <= 0.02 + 1e-12


def test_solve_step_exhaustion():
    g = np.array([1.0, 1.0])
    prob = TrustRegionProblem(lambda: g, lambda idx, v: v,
                              lambda th: (float(g @ th), 0.0 if not th.any() else 1.0),
                              np.zeros(2), 0.1)
    theta, rep = solve_step(prob)
    assert not rep.accepted and np.all(theta == 0)
    assert rep.reason == "line search exhausted"


def test_solve_step_degenerate():
    theta, rep = solve_step(quadratic_problem([0.0, 0.0], np.eye(2), 0.1))
    assert not rep.accepted and rep.reason == "degenerate direction"
    assert np.all(theta == 0)


def test_non_finite_candidate_is_rejected_and_backtracked():
    g = np.array([1.0])
    calls = []

    def eval_fn(th):
        calls.append(th[0])
        if len(calls) == 2:  # the k=0 candidate
            return float("nan"), 0.0
        return float(g @ th), 0.5 * float(th @ th)

    theta, rep = solve_step(TrustRegionProblem(lambda: g, lambda i, v: v, eval_fn, np.zeros(1), 0.5))
    assert rep.accepted and rep.backtracks_used == 1
    assert theta[0] == pytest.approx(0.8, rel=1e-4)


def test_damping_changes_little():
    prob = quadratic_problem([3.0, 4.0], np.eye(2), 0.02)
    a, _ = solve_step(prob, TrustRegionConfig(damping=0.0))
    b, _ = solve_step(prob, TrustRegionConfig(damping=1e-5))
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-4


def test_backtrack_schedule():
    c = backtrack_coefficients(TrustRegionConfig())
    assert c[0] == 1.0 and len(c) == 16
    np.testing.assert_allclose(np.diff(np.log(c)), np.log(0.8))
    assert backtrack_coefficients(TrustRegionConfig(strict_appendix_a=True))[0] == 0.8


def test_strict_mode_takes_shrunk_step():
    theta, rep = solve_step(quadratic_problem([3.0, 4.0], np.eye(2), 0.02),
                            TrustRegionConfig(strict_appendix_a=True))
    assert rep.step_norm == pytest.approx(0.16, rel=1e-4)


def test_nonzero_constraint_at_old_rejected():
    prob = TrustRegionProblem(lambda: np.ones(1), lambda i, v: v, lambda th: (0.0, 1.0),
                              np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        solve_step(prob)


def test_config_validation():
    with pytest.raises(ValueError):
        TrustRegionConfig(backtrack_ratio=1.5)
    with pytest.raises(ValueError):
        TrustRegionConfig(subsample_fraction=0.0)


def test_subsampled_direction_close_to_full(rng):
    n, d = 10_000, 5
    X = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0, d)
    w = rng.standard_normal(d)
    y = X @ w + 0.1 * rng.standard_normal(n)
    theta0 = np.zeros(d)
    g = X.T @ (y - X @ theta0) / n

    def avp(idx, v):
        Xs = X if idx is None else X[idx]
        return Xs.T @ (Xs @ v) / Xs.shape[0]

    def eval_fn(theta):
        return -float(np.mean((y - X @ theta) ** 2)), 0.5 * float(np.mean((X @ (theta - theta0)) ** 2))

    prob = TrustRegionProblem(lambda: g, avp, eval_fn, theta0, 0.01, n_samples=n)
    full, _ = solve_step(prob, TrustRegionConfig(cg_iters=d))
    sub, rep = solve_step(prob, TrustRegionConfig(cg_iters=d, subsample_fraction=0.1, seed=3))
    assert rep.accepted
    cos = full @ sub / (np.linalg.norm(full) * np.linalg.norm(sub))
    assert cos > 0.9
