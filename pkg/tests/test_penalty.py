"""Penalty level, normal quantile, data-driven loadings, and the iterated scheme."""

import math

import numpy as np
import pytest
import scipy.stats
from numpy.testing import assert_allclose

from clusterlasso.penalty import (
    ConvergenceError,
    PenaltyConfig,
    default_gamma,
    ideal_loadings,
    initial_loadings,
    iterate_loadings,
    iterate_loadings_panel,
    loading_values,
    normal_quantile,
    penalty_level,
    refined_loadings,
    regularization_event_check,
)
from clusterlasso.panel import PanelData, within_demean
from clusterlasso.testkit import brute_force_loadings

# Reference values computed independently with 40-digit arithmetic
# (inverse error function), rounded to double precision.
QNORM_FROZEN = {
    0.975: 1.959963984540054235525,
    0.95: 1.644853626951472714864,
    0.99: 2.326347874040841100886,
    0.9: 1.281551565544600466965,
    0.3: -0.5244005127080407840383,
    1e-6: -4.753424308822898948194,
    1 - 1e-6: 4.753424308822898948194,
    1e-12: -7.03448382530113192981,
}

LAMBDA_FROZEN = [
    # (n_obs, n_cols, c, gamma, expected)  gamma=None means the size default
    (1000, 800, 1.1, None, 298.2595458881346052609),
    (500, 400, 1.1, None, 201.996728017779685496),
    (200, 160, 1.1, None, 119.7939494546972516443),
    (60, 12, 2.0, 0.05, 88.77684149108194195282),
]


# ---------------------------------------------------------------------------
# normal quantile
# ---------------------------------------------------------------------------

def test_normal_quantile_frozen_values():
    # the rational approximation is good to ~1e-11 absolute in the far tails
    for prob, expected in QNORM_FROZEN.items():
        assert normal_quantile(prob) == pytest.approx(expected, abs=5e-11)
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.975) == pytest.approx(QNORM_FROZEN[0.975], abs=1e-14)


def test_normal_quantile_matches_scipy_over_a_sweep():
    probs = np.concatenate([
        np.linspace(1e-10, 1 - 1e-10, 211),
        10.0 ** -np.arange(2, 15),
    ])
    ours = np.array([normal_quantile(float(q)) for q in probs])
    theirs = scipy.stats.norm.ppf(probs)
    assert np.abs(ours - theirs).max() < 1e-9


def test_normal_quantile_is_antisymmetric():
    for prob in (0.0001, 0.2, 0.47, 0.731, 0.9999):
        assert normal_quantile(1 - prob) == pytest.approx(-normal_quantile(prob), abs=1e-13)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.1])
def test_normal_quantile_domain(bad):
    with pytest.raises(ValueError):
        normal_quantile(bad)


# ---------------------------------------------------------------------------
# penalty level
# ---------------------------------------------------------------------------

def test_default_gamma_formula():
    assert default_gamma(1000, 800) == pytest.approx(0.1 / math.log(1000), rel=1e-15)
    assert default_gamma(100, 5000) == pytest.approx(0.1 / math.log(5000), rel=1e-15)
    with pytest.raises(ValueError):
        default_gamma(1, 1)


def test_penalty_level_frozen_values():
    # quantile error near 1e-12 scales by 2 c sqrt(N): allow ~1e-10 relative
    for n_obs, n_cols, c, gamma, expected in LAMBDA_FROZEN:
        assert penalty_level(n_obs, n_cols, c, gamma) == pytest.approx(expected, rel=1e-10)


def test_penalty_level_closed_form_against_scipy():
    n_obs, n_cols, c, gamma = 750, 333, 0.9, 0.07
    expected = 2 * c * math.sqrt(n_obs) * scipy.stats.norm.ppf(1 - gamma / (2 * n_cols))
    assert penalty_level(n_obs, n_cols, c, gamma) == pytest.approx(expected, rel=1e-9)


def test_penalty_level_validation():
    with pytest.raises(ValueError):
        penalty_level(0, 10)
    with pytest.raises(ValueError):
        penalty_level(10, 10, c=0.0)
    with pytest.raises(ValueError):
        penalty_level(10, 1, gamma=1.5)  # quantile argument would leave (1/2, 1)


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(c=-1.0)
    with pytest.raises(ValueError):
        PenaltyConfig(gamma=1.0)
    with pytest.raises(ValueError):
        PenaltyConfig(K=0)
    with pytest.raises(ValueError):
        PenaltyConfig(refit_mode="ridge")
    with pytest.raises(ValueError):
        PenaltyConfig(loading_mode="robust")
    config = PenaltyConfig(gamma=0.2)
    assert config.gamma_for(100, 100) == 0.2
    assert PenaltyConfig().gamma_for(100, 900) == pytest.approx(0.1 / math.log(900))


# ---------------------------------------------------------------------------
# loadings
# ---------------------------------------------------------------------------

def unbalanced_layout(seed, sizes=(3, 5, 2, 4), p=4):
    rng = np.random.default_rng(seed)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    N = starts[-1]
    X = rng.standard_normal((N, p))
    v = rng.standard_normal(N)
    ids = np.repeat(np.arange(len(sizes)), sizes)
    return X, v, starts, ids


def test_clustered_loadings_match_brute_force_unbalanced():
    X, v, starts, ids = unbalanced_layout(30)
    assert_allclose(
        loading_values(X, v, starts, "clustered"),
        brute_force_loadings(X, v, ids),
        rtol=1e-12,
    )


def test_clustered_loadings_match_brute_force_balanced():
    rng = np.random.default_rng(31)
    n, T, p = 5, 4, 3
    X = rng.standard_normal((n * T, p))
    v = rng.standard_normal(n * T)
    starts = np.arange(0, n * T + 1, T)
    ids = np.repeat(np.arange(n), T)
    assert_allclose(
        loading_values(X, v, starts, "clustered"),
        brute_force_loadings(X, v, ids),
        rtol=1e-12,
    )


def test_heteroscedastic_loadings_square_row_by_row():
    X, v, starts, _ = unbalanced_layout(32)
    expected = np.sqrt(((X * v[:, None]) ** 2).sum(axis=0) / X.shape[0])
    assert_allclose(loading_values(X, v, starts, "heteroscedastic"), expected, rtol=1e-12)


def test_clustered_equals_heteroscedastic_with_singletons():
    rng = np.random.default_rng(33)
    X = rng.standard_normal((8, 3))
    v = rng.standard_normal(8)
    starts = np.arange(9)
    assert_allclose(
        loading_values(X, v, starts, "clustered"),
        loading_values(X, v, starts, "heteroscedastic"),
        rtol=1e-14,
    )


def test_loading_values_validation():
    with pytest.raises(ValueError, match="length"):
        loading_values(np.ones((4, 2)), np.ones(3), np.array([0, 4]))
    with pytest.raises(ValueError, match="mode"):
        loading_values(np.ones((4, 2)), np.ones(4), np.array([0, 4]), mode="nope")


def test_loading_constructors_tag_their_source():
    X, v, starts, _ = unbalanced_layout(34)
    config = PenaltyConfig()
    assert initial_loadings(X, v, starts, config).source == "outcome"
    assert refined_loadings(X, v, starts, config).source == "residual"
    assert ideal_loadings(X, v, starts).source == "ideal"
    zero = initial_loadings(X, np.zeros_like(v), starts, config)
    assert zero.all_zero


def test_regularization_event_check_hand_cases():
    X = np.eye(4)
    eps = np.array([0.1, -0.1, 0.1, -0.1])
    phi = np.ones(4)
    # lam phi / N = lam/4 against 2c|score| = 2.2 * 0.025
    assert regularization_event_check(X, eps, lam=1.0, loadings=phi, c=1.1)
    assert not regularization_event_check(X, eps, lam=0.1, loadings=phi, c=1.1)


# ---------------------------------------------------------------------------
# iterated loadings
# ---------------------------------------------------------------------------

def selection_data(seed=35, n=20, T=5, p=12, strength=4.0):
    rng = np.random.default_rng(seed)
    N = n * T
    starts = np.arange(0, N + 1, T)
    X = rng.standard_normal((N, p))
    X -= X.reshape(n, T, p).mean(axis=1, keepdims=True).repeat(T, axis=0).reshape(N, p)
    noise = rng.standard_normal(N)
    noise -= noise.reshape(n, T).mean(axis=1, keepdims=True).repeat(T, axis=1).reshape(-1)
    y = strength * X[:, 0] - strength * X[:, 3] + noise
    return X, y, starts


def test_iterate_loadings_selects_strong_signal():
    X, y, starts = selection_data()
    result = iterate_loadings(X, y, starts)
    assert 0 in result.support and 3 in result.support
    assert result.rounds >= 2
    assert len(result.loadings_trace) == result.rounds if result.rounds < 15 else True
    # final residuals are the post-refit residuals on the final support
    refit_resid = y - X[:, result.support] @ np.linalg.lstsq(
        X[:, result.support], y, rcond=None
    )[0]
    assert_allclose(result.residuals, refit_resid, atol=1e-10)
    assert result.lam == pytest.approx(
        penalty_level(len(y), X.shape[1], 1.1, result.gamma), rel=1e-14
    )


def test_iterate_loadings_empty_selection_is_a_fixed_point():
    X, y, starts = selection_data(strength=0.0)
    result = iterate_loadings(X, y, starts, PenaltyConfig(c=50.0))
    assert result.support == ()
    # empty round: residuals stay equal to the outcome, loadings repeat, loop stops
    assert result.rounds == 1
    assert len(result.loadings_trace) == 1
    assert_allclose(result.residuals, y, atol=1e-14)


def test_iterate_loadings_zero_outcome_degenerates():
    X, _, starts = selection_data()
    result = iterate_loadings(X, np.zeros(X.shape[0]), starts)
    assert result.degenerate
    assert result.support == ()
    assert result.fit.converged


def test_iterate_loadings_is_deterministic():
    X, y, starts = selection_data(36)
    a = iterate_loadings(X, y, starts)
    b = iterate_loadings(X, y, starts)
    assert a.support == b.support
    assert_allclose(a.fit.beta, b.fit.beta, rtol=0, atol=0)


def test_iterate_loadings_raises_on_failed_certification():
    X, y, starts = selection_data(37)
    with pytest.raises(ConvergenceError, match="round"):
        iterate_loadings(X, y, starts, PenaltyConfig(max_sweeps=1, kkt_tol=1e-14))


def test_iterate_loadings_lasso_refit_mode_changes_residuals():
    X, y, starts = selection_data(38)
    post = iterate_loadings(X, y, starts, PenaltyConfig(refit_mode="post-lasso"))
    lasso = iterate_loadings(X, y, starts, PenaltyConfig(refit_mode="lasso"))
    assert_allclose(lasso.residuals, y - X @ lasso.fit.beta, atol=1e-12)
    # shrunk coefficients leave larger residuals than the refit
    assert float(lasso.residuals @ lasso.residuals) >= float(post.residuals @ post.residuals)


def test_iterate_loadings_panel_excludes_flat_columns():
    n, T = 6, 4
    rng = np.random.default_rng(39)
    N = n * T
    X = rng.standard_normal((N, 3))
    X[:, 2] = np.repeat(rng.standard_normal(n), T)  # constant within cluster
    panel = PanelData(
        cluster_index=np.repeat(np.arange(n), T),
        time_index=np.tile(np.arange(T), n),
        X=np.column_stack([X, rng.standard_normal(N)]),
        column_names=("a", "b", "flat", "y"),
    )
    dm = within_demean(panel)
    result = iterate_loadings_panel(dm, dm.column("y"), ["a", "b", "flat"],
                                    PenaltyConfig(c=0.01))
    assert 2 not in result.support  # the flat column can never enter
