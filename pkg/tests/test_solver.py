"""Coordinate-descent Lasso solver against closed-form and brute-force oracles."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from clusterlasso.solver import (
    LassoFit,
    LassoProblem,
    _cd_covariance_plain,
    effective_loadings,
    post_lasso,
    solve_lasso,
)
from clusterlasso.testkit import reference_ols, soft_threshold_oracle


def random_problem(seed, N=60, p=8, lam=12.0, rho=0.3):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((N, p))
    X = base + rho * rng.standard_normal((N, 1))  # mildly correlated columns
    beta = np.zeros(p)
    beta[: p // 2] = rng.standard_normal(p // 2)
    y = X @ beta + rng.standard_normal(N)
    loadings = rng.uniform(0.5, 2.0, size=p)
    return LassoProblem(X, y, lam, loadings)


def orthonormal_problem(seed, N=50, p=6, lam=8.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((N, p)))
    X = Q * np.sqrt(N)  # X'X = N I
    y = rng.standard_normal(N)
    loadings = rng.uniform(0.5, 2.0, size=p)
    return LassoProblem(X, y, lam, loadings)


# ---------------------------------------------------------------------------
# closed-form agreement
# ---------------------------------------------------------------------------

def test_zero_penalty_recovers_ols():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((80, 5))
    y = rng.standard_normal(80)
    problem = LassoProblem(X, y, 0.0, np.ones(5))
    fit = solve_lasso(problem)
    assert fit.converged
    assert_allclose(fit.beta, reference_ols(X, y), atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_orthonormal_design_matches_soft_threshold(seed):
    problem = orthonormal_problem(seed)
    fit = solve_lasso(problem)
    assert fit.converged
    N = problem.n_obs
    # with X'X = N I the coordinates decouple into scalar problems
    expected = np.array([
        soft_threshold_oracle(
            float(problem.X[:, j] @ problem.y) / N,
            problem.lam * problem.loadings[j] / (2.0 * N),
        )
        for j in range(problem.n_cols)
    ])
    assert np.abs(fit.beta - expected).max() <= 1e-7


def test_huge_penalty_empties_the_support():
    problem = random_problem(11, lam=1e9)
    fit = solve_lasso(problem)
    assert fit.is_empty
    assert fit.converged
    assert fit.objective == pytest.approx(
        float(problem.y @ problem.y) / problem.n_obs, rel=1e-12
    )


# ---------------------------------------------------------------------------
# KKT certificate
# ---------------------------------------------------------------------------

def kkt_violation(problem: LassoProblem, fit: LassoFit) -> float:
    """Stationarity residual recomputed from scratch."""
    X, y, lam = problem.X, problem.y, problem.lam
    N = X.shape[0]
    grad = 2.0 * X.T @ (y - X @ fit.beta) / N
    worst = 0.0
    for j in range(problem.n_cols):
        if j in problem.excluded:
            continue
        target = lam * fit.effective_loadings[j] / N
        if fit.beta[j] != 0.0:
            worst = max(worst, abs(grad[j] - np.sign(fit.beta[j]) * target))
        else:
            worst = max(worst, max(0.0, abs(grad[j]) - target))
    return worst


@pytest.mark.parametrize("seed", range(8))
def test_kkt_certificate_holds_and_is_honest(seed):
    problem = random_problem(seed, lam=float(5 + 3 * seed))
    fit = solve_lasso(problem)
    assert fit.converged
    assert fit.kkt_residual <= 1e-6
    assert kkt_violation(problem, fit) == pytest.approx(fit.kkt_residual, abs=1e-9)


def test_sweep_cap_reports_non_convergence():
    problem = random_problem(12, lam=0.01, rho=0.95)
    fit = solve_lasso(problem, max_sweeps=1)
    assert not fit.converged


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------

def test_outcome_and_penalty_scale_equivariance():
    problem = random_problem(13)
    fit = solve_lasso(problem)
    kappa = 3.7
    scaled = LassoProblem(problem.X, kappa * problem.y, kappa * problem.lam, problem.loadings)
    fit2 = solve_lasso(scaled)
    assert_allclose(fit2.beta, kappa * fit.beta, rtol=1e-8, atol=1e-10)
    assert fit2.support == fit.support


def test_column_and_loading_scale_equivariance():
    problem = random_problem(14)
    fit = solve_lasso(problem)
    kappa = 2.5
    X2 = problem.X.copy()
    X2[:, 0] *= kappa
    phi2 = problem.loadings.copy()
    phi2[0] *= kappa
    fit2 = solve_lasso(LassoProblem(X2, problem.y, problem.lam, phi2))
    assert fit2.support == fit.support
    expected = fit.beta.copy()
    expected[0] /= kappa
    assert_allclose(fit2.beta, expected, rtol=1e-7, atol=1e-10)


def test_covariance_and_residual_methods_agree():
    problem = random_problem(15, N=40, p=12, lam=6.0)
    cov = solve_lasso(problem, method="covariance")
    res = solve_lasso(
        LassoProblem(problem.X, problem.y, problem.lam, problem.loadings),
        method="residual",
    )
    assert cov.support == res.support
    assert_allclose(cov.beta, res.beta, atol=1e-7)


def test_supplied_gram_matches_internal_gram():
    problem = random_problem(16)
    G = problem.X.T @ problem.X
    g = problem.X.T @ problem.y
    with_gram = solve_lasso(
        LassoProblem(problem.X, problem.y, problem.lam, problem.loadings, gram=G, Xty=g)
    )
    without = solve_lasso(problem)
    assert_allclose(with_gram.beta, without.beta, atol=1e-10)


def test_numba_kernel_agrees_with_plain_python():
    problem = random_problem(17, N=30, p=6, lam=4.0)
    X, y = problem.X, problem.y
    G = X.T @ X
    g = X.T @ y
    diag = G.diagonal().copy()
    thr = problem.lam * problem.loadings / 2.0
    eligible = np.ones(problem.n_cols, dtype=bool)

    fast = solve_lasso(problem)  # dispatches to the compiled kernel when present
    b = np.zeros(problem.n_cols)
    q = np.zeros(problem.n_cols)
    trace = np.empty(1001)
    trace[0] = 0.0
    _cd_covariance_plain(G, g, diag, thr, eligible, b, q, 1e-8, 1000, trace)
    assert_allclose(fast.beta, b, atol=1e-9)


def test_objective_trace_is_monotone_decreasing():
    problem = random_problem(18, lam=2.0)
    fit = solve_lasso(problem)
    trace = fit.objective_trace
    slack = 1e-9 * (1.0 + np.abs(trace).max())
    assert np.all(np.diff(trace) <= slack)
    assert fit.objective == trace[-1]


def test_warm_start_changes_nothing_at_the_solution():
    problem = random_problem(19)
    fit = solve_lasso(problem)
    again = solve_lasso(
        LassoProblem(problem.X, problem.y, problem.lam, problem.loadings),
        warm_start=fit.beta,
    )
    assert_allclose(again.beta, fit.beta, atol=1e-9)
    with pytest.raises(ValueError, match="warm_start"):
        solve_lasso(problem, warm_start=np.zeros(3))


# ---------------------------------------------------------------------------
# special columns
# ---------------------------------------------------------------------------

def test_always_include_is_never_penalized():
    rng = np.random.default_rng(20)
    X = rng.standard_normal((50, 4))
    y = X[:, 0] * 2.0  # outcome lives on column 0
    problem = LassoProblem(X, y, 1e8, np.ones(4), always_include=(0,))
    fit = solve_lasso(problem)
    assert 0 in fit.support
    assert set(fit.support) == {0}
    assert fit.beta[0] == pytest.approx(2.0, rel=1e-6)
    assert fit.effective_loadings[0] == 0.0


def test_excluded_column_is_frozen_at_zero():
    rng = np.random.default_rng(21)
    X = rng.standard_normal((50, 3))
    y = X[:, 1] * 3.0
    fit = solve_lasso(LassoProblem(X, y, 0.0, np.ones(3), excluded=(1,)))
    assert fit.beta[1] == 0.0
    assert 1 not in fit.support


def test_zero_variance_column_is_frozen():
    rng = np.random.default_rng(22)
    X = rng.standard_normal((40, 3))
    X[:, 2] = 0.0
    y = rng.standard_normal(40)
    fit = solve_lasso(LassoProblem(X, y, 1.0, np.ones(3)))
    assert fit.beta[2] == 0.0


def test_zero_loading_on_penalized_column_is_floored():
    problem = random_problem(23)
    phi = problem.loadings.copy()
    phi[0] = 0.0
    floored = effective_loadings(LassoProblem(problem.X, problem.y, problem.lam, phi))
    assert floored[0] > 0.0
    assert floored[0] == pytest.approx(1e-4 * np.median(phi[phi > 0]), rel=1e-12)


# ---------------------------------------------------------------------------
# problem validation
# ---------------------------------------------------------------------------

def test_problem_validation_errors():
    X = np.ones((4, 2))
    y = np.ones(4)
    with pytest.raises(ValueError, match="rows"):
        LassoProblem(X, np.ones(5), 1.0, np.ones(2))
    with pytest.raises(ValueError, match="lam"):
        LassoProblem(X, y, -1.0, np.ones(2))
    with pytest.raises(ValueError, match="loadings"):
        LassoProblem(X, y, 1.0, np.ones(3))
    with pytest.raises(ValueError, match="nonnegative"):
        LassoProblem(X, y, 1.0, np.array([1.0, -1.0]))
    with pytest.raises(ValueError, match="out of range"):
        LassoProblem(X, y, 1.0, np.ones(2), excluded=(5,))
    with pytest.raises(ValueError, match="both"):
        LassoProblem(X, y, 1.0, np.ones(2), always_include=(0,), excluded=(0,))
    with pytest.raises(ValueError, match="method"):
        solve_lasso(LassoProblem(X, y, 1.0, np.ones(2)), method="magic")


# ---------------------------------------------------------------------------
# post-Lasso refit
# ---------------------------------------------------------------------------

def test_post_lasso_matches_reference_ols_on_support():
    rng = np.random.default_rng(24)
    X = rng.standard_normal((60, 6))
    y = rng.standard_normal(60)
    support = (1, 3, 4)
    refit = post_lasso(X, y, support)
    expected = reference_ols(X[:, support], y)
    assert_allclose(refit.beta[list(support)], expected, atol=1e-8)
    assert np.all(refit.beta[[0, 2, 5]] == 0.0)
    assert_allclose(refit.fitted + refit.residuals, y, atol=1e-12)
    assert not refit.rank_deficient


def test_post_lasso_empty_support_returns_outcome_as_residuals():
    y = np.arange(5.0)
    refit = post_lasso(np.ones((5, 2)), y, ())
    assert np.all(refit.beta == 0.0)
    assert_allclose(refit.residuals, y)
    assert np.all(refit.fitted == 0.0)


def test_post_lasso_flags_rank_deficiency():
    rng = np.random.default_rng(25)
    X = rng.standard_normal((30, 3))
    X[:, 2] = X[:, 1]
    refit = post_lasso(X, rng.standard_normal(30), (1, 2))
    assert refit.rank_deficient


def test_post_lasso_rejects_bad_support():
    with pytest.raises(ValueError, match="out of range"):
        post_lasso(np.ones((4, 2)), np.ones(4), (7,))
