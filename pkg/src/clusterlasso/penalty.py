"""Penalty level and data-driven penalty loadings.

The penalty level is lambda = 2 c sqrt(N) * Phi^-1(1 - gamma / (2p)).  Each
column j then carries its own loading

    phi_j = sqrt( (1/N) sum_i ( sum_{t in cluster i} x_itj v_it )^2 ),

where v is the current residual (or, before any residual exists, the
demeaned outcome itself).  Summing scores within clusters before squaring
is what makes the penalty robust to arbitrary within-cluster dependence;
the "heteroscedastic" mode squares row by row instead and is kept as a
comparison estimator for data that is dependent within clusters.

Loadings are refined in rounds: solve, refit, recompute loadings from the
new residuals, resolve, warm-starting each solve at the previous solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .panel import DemeanedPanel, group_sums
from .solver import LassoFit, LassoProblem, PostLassoFit, post_lasso, solve_lasso

LOADING_MODES = ("clustered", "heteroscedastic")
REFIT_MODES = ("post-lasso", "lasso")


class ConvergenceError(RuntimeError):
    """The coordinate-descent solver failed to certify a solution."""


# ---------------------------------------------------------------------------
# standard normal quantile
# ---------------------------------------------------------------------------

# Rational approximations from Wichura's algorithm AS 241 (PPND16); observed
# absolute error in double precision stays below ~1e-11 over the full open
# unit interval, far inside the 1e-9 contract this module advertises.
_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
    1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
    7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def normal_quantile(prob: float) -> float:
    """Inverse standard normal CDF, accurate to well below 1e-9 absolute."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie strictly inside (0, 1), got {prob}")
    q = prob - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = prob if q < 0.0 else 1.0 - prob
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if q < 0.0 else x


# ---------------------------------------------------------------------------
# penalty level and configuration
# ---------------------------------------------------------------------------

def default_gamma(n_obs: int, n_cols: int) -> float:
    """Slack probability 0.1 / log(max(p, N)); shrinks slowly with size."""
    m = max(n_obs, n_cols)
    if m < 2:
        raise ValueError(f"max(N, p) must be at least 2, got {m}")
    return 0.1 / math.log(m)


def penalty_level(n_obs: int, n_cols: int, c: float = 1.1, gamma: float | None = None) -> float:
    """lambda = 2 c sqrt(N) * Phi^-1(1 - gamma / (2 p))."""
    if n_obs < 1 or n_cols < 1:
        raise ValueError(f"need N >= 1 and p >= 1, got N={n_obs}, p={n_cols}")
    if c <= 0:
        raise ValueError(f"slack multiplier c must be positive, got {c}")
    if gamma is None:
        gamma = default_gamma(n_obs, n_cols)
    if not 0.0 < gamma / (2.0 * n_cols) < 0.5:
        raise ValueError(
            f"gamma={gamma} with p={n_cols} puts the quantile argument outside (1/2, 1)"
        )
    return 2.0 * c * math.sqrt(n_obs) * normal_quantile(1.0 - gamma / (2.0 * n_cols))


@dataclass
class PenaltyConfig:
    """Knobs of the iterated penalization scheme.

    ``gamma=None`` applies the size-dependent default at solve time.  ``K``
    counts total solves: the initial one plus K - 1 refinement rounds.
    ``refit_mode`` picks which residuals feed the next round's loadings.
    """

    c: float = 1.1
    gamma: float | None = None
    K: int = 15
    refit_mode: str = "post-lasso"
    loading_mode: str = "clustered"
    tol: float = 1e-8
    kkt_tol: float = 1e-6
    max_sweeps: int = 5000

    def __post_init__(self) -> None:
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.refit_mode not in REFIT_MODES:
            raise ValueError(f"refit_mode must be one of {REFIT_MODES}, got {self.refit_mode!r}")
        if self.loading_mode not in LOADING_MODES:
            raise ValueError(
                f"loading_mode must be one of {LOADING_MODES}, got {self.loading_mode!r}"
            )

    def gamma_for(self, n_obs: int, n_cols: int) -> float:
        return self.gamma if self.gamma is not None else default_gamma(n_obs, n_cols)


# ---------------------------------------------------------------------------
# loadings
# ---------------------------------------------------------------------------

@dataclass
class Loadings:
    """Per-column penalty loadings plus how they were produced.

    ``source`` is "outcome" for the startup loadings (residuals replaced by
    the demeaned outcome), "residual" for refined rounds, and "ideal" when
    computed from true disturbances (available in simulations only).
    """

    values: np.ndarray
    mode: str
    source: str

    @property
    def all_zero(self) -> bool:
        return bool(np.all(self.values == 0.0))


def loading_values(
    X: np.ndarray, v: np.ndarray, starts: np.ndarray, mode: str = "clustered"
) -> np.ndarray:
    """phi_j from scores x_j * v: cluster-summed or row-wise squared."""
    X = np.asarray(X, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    N = X.shape[0]
    if v.shape[0] != N:
        raise ValueError(f"series length {v.shape[0]} does not match {N} rows")
    if mode == "clustered":
        n = len(starts) - 1
        if N == n:  # all singletons: identical to the row-wise formula
            sums_sq = (X * v[:, None]) ** 2
            return np.sqrt(sums_sq.sum(axis=0) / N)
        if _is_balanced(starts):
            T = starts[1] - starts[0]
            scores = (X * v[:, None]).reshape(n, T, X.shape[1]).sum(axis=1)
        else:
            scores = group_sums(X * v[:, None], starts)
        return np.sqrt(np.einsum("ij,ij->j", scores, scores) / N)
    if mode == "heteroscedastic":
        return np.sqrt(np.einsum("ij,ij,i,i->j", X, X, v, v) / N)
    raise ValueError(f"unknown loading mode {mode!r}")


def _is_balanced(starts: np.ndarray) -> bool:
    sizes = np.diff(starts)
    return bool(sizes.size) and bool(np.all(sizes == sizes[0]))


def initial_loadings(
    X: np.ndarray, outcome: np.ndarray, starts: np.ndarray, config: PenaltyConfig
) -> Loadings:
    """Startup loadings: residuals are not available yet, the outcome stands in."""
    return Loadings(loading_values(X, outcome, starts, config.loading_mode),
                    mode=config.loading_mode, source="outcome")


def refined_loadings(
    X: np.ndarray, residuals: np.ndarray, starts: np.ndarray, config: PenaltyConfig
) -> Loadings:
    return Loadings(loading_values(X, residuals, starts, config.loading_mode),
                    mode=config.loading_mode, source="residual")


def ideal_loadings(
    X: np.ndarray, true_residuals: np.ndarray, starts: np.ndarray,
    mode: str = "clustered",
) -> Loadings:
    """Loadings built from the true disturbances; the benchmark the refinement chases."""
    return Loadings(loading_values(X, true_residuals, starts, mode), mode=mode, source="ideal")


def regularization_event_check(
    X: np.ndarray,
    true_residuals: np.ndarray,
    lam: float,
    loadings: Loadings | np.ndarray,
    c: float = 1.1,
) -> bool:
    """Does the penalty dominate the score vector?

    Checks lam * phi_j / N >= 2 c | (1/N) sum_it x_itj eps_it | for every
    column.  The penalty level is calibrated so this holds with probability
    roughly 1 - gamma under ideal loadings.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = np.asarray(true_residuals, dtype=np.float64).reshape(-1)
    N = X.shape[0]
    phi = loadings.values if isinstance(loadings, Loadings) else np.asarray(loadings)
    score = X.T @ eps / N
    return bool(np.all(lam * phi / N >= 2.0 * c * np.abs(score)))


# ---------------------------------------------------------------------------
# iterated loadings
# ---------------------------------------------------------------------------

@dataclass
class IteratedFit:
    """Outcome of the full solve-refit-reload cycle on one equation."""

    lam: float
    gamma: float
    loadings: Loadings
    fit: LassoFit
    post: PostLassoFit
    residuals: np.ndarray
    loadings_trace: list[np.ndarray] = field(default_factory=list)
    rounds: int = 0
    degenerate: bool = False

    @property
    def support(self) -> tuple[int, ...]:
        return self.fit.support


def iterate_loadings(
    X: np.ndarray,
    outcome: np.ndarray,
    starts: np.ndarray,
    config: PenaltyConfig | None = None,
    excluded: tuple[int, ...] = (),
    gram: np.ndarray | None = None,
    Xty: np.ndarray | None = None,
) -> IteratedFit:
    """Run the K-round penalized selection on one equation.

    Round 1 solves under startup loadings; each later round rebuilds the
    loadings from current residuals (post-refit residuals under the default
    ``refit_mode``) and re-solves, warm-started.  Rounds stop early when the
    loadings reach a fixed point, which changes nothing downstream since
    identical loadings reproduce the identical solution.

    Raises :class:`ConvergenceError`, naming the round, if any solve fails
    to certify.
    """
    if config is None:
        config = PenaltyConfig()
    X = np.asarray(X, dtype=np.float64)
    outcome = np.asarray(outcome, dtype=np.float64).reshape(-1)
    N, p = X.shape
    gamma = config.gamma_for(N, p)
    lam = penalty_level(N, p, config.c, gamma)

    phi = initial_loadings(X, outcome, starts, config)
    trace = [phi.values.copy()]
    if phi.all_zero:
        # a zero outcome yields zero loadings everywhere: nothing to select
        sse = float(outcome @ outcome) / N
        empty = LassoFit(
            beta=np.zeros(p), support=(), objective=sse,
            objective_trace=np.array([sse]), kkt_residual=0.0, converged=True,
            n_sweeps=0, lam=lam, effective_loadings=phi.values.copy(),
        )
        post = post_lasso(X, outcome, ())
        return IteratedFit(
            lam=lam, gamma=gamma, loadings=phi, fit=empty, post=post,
            residuals=outcome.copy(), loadings_trace=trace, rounds=1, degenerate=True,
        )

    fit: LassoFit | None = None
    residuals = outcome
    rounds = 0
    for k in range(1, config.K + 1):
        if k > 1:
            new_phi = refined_loadings(X, residuals, starts, config)
            scale = max(float(np.max(np.abs(phi.values))), 1e-300)
            if np.max(np.abs(new_phi.values - phi.values)) <= 1e-12 * scale:
                break  # fixed point: further rounds would reproduce this solution
            phi = new_phi
            trace.append(phi.values.copy())
        problem = LassoProblem(
            X, outcome, lam, phi.values, excluded=excluded, gram=gram, Xty=Xty
        )
        fit = solve_lasso(
            problem,
            tol=config.tol,
            kkt_tol=config.kkt_tol,
            max_sweeps=config.max_sweeps,
            warm_start=None if fit is None else fit.beta,
        )
        rounds = k
        if not fit.converged:
            raise ConvergenceError(
                f"coordinate descent failed to certify in loading round {k} "
                f"(kkt residual {fit.kkt_residual:.3e} after {fit.n_sweeps} sweeps)"
            )
        if config.refit_mode == "post-lasso":
            refit = post_lasso(X, outcome, fit.support)
            residuals = refit.residuals
        else:
            residuals = outcome - X @ fit.beta

    post = post_lasso(X, outcome, fit.support)
    final_resid = post.residuals if config.refit_mode == "post-lasso" else outcome - X @ fit.beta
    return IteratedFit(
        lam=lam, gamma=gamma, loadings=phi, fit=fit, post=post,
        residuals=final_resid, loadings_trace=trace, rounds=rounds,
    )


def iterate_loadings_panel(
    dm: DemeanedPanel,
    outcome: np.ndarray,
    candidate_cols,
    config: PenaltyConfig | None = None,
) -> IteratedFit:
    """Column-name front end of :func:`iterate_loadings` for demeaned panels."""
    names = list(candidate_cols)
    X = dm.columns(names)
    zero_var = {dm.column_names[j] for j in dm.zero_variance_columns}
    excluded = tuple(k for k, name in enumerate(names) if name in zero_var)
    return iterate_loadings(X, outcome, dm.cluster_starts, config, excluded=excluded)
