"""Treatment-effect estimators built on cluster-robust Lasso selection.

Two routes to a scalar treatment effect alpha on within-demeaned data:

* instrument selection: pick instruments for an endogenous treatment with
  the penalized first stage, instrument the treatment with its refit fitted
  values, and sandwich the variance with within-cluster score sums;
* double selection: select controls that predict the outcome, select
  controls that predict the treatment, and run OLS of the outcome on the
  treatment plus the union, again with cluster-robust sandwiches.

Both report a heteroscedasticity-only standard error alongside the
clustered one; with singleton clusters the two coincide exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .panel import PanelData, SchemaError, apply_cluster_weights, clustered_meat, within_demean
from .penalty import IteratedFit, PenaltyConfig, iterate_loadings, normal_quantile

# Q-matrix entries below this are treated as a rank/identification failure.
_DEGENERACY_TOL = 1e-12

# Relative residual-variance threshold under which a column adds nothing
# beyond the columns before it and is dropped from the final OLS.
_COLLINEARITY_TOL = 1e-10


class RankFailure(RuntimeError):
    """The final regression (or identification quantity) is rank deficient."""


@dataclass
class IVEstimate:
    """Instrument-selection estimate of a scalar treatment effect."""

    alpha: float
    se_clustered: float
    se_heteroscedastic: float
    selected: tuple
    no_instruments: bool
    lam: float
    n_obs: int
    n_clusters: int
    first_stage: IteratedFit | None = None

    @property
    def n_selected(self) -> int:
        return len(self.selected)


@dataclass
class PDSEstimate:
    """Double-selection estimate of a scalar treatment effect."""

    alpha: float
    se_clustered: float
    se_heteroscedastic: float
    selected: tuple
    selected_outcome: tuple
    selected_treatment: tuple
    dropped_collinear: tuple
    lam: float
    n_obs: int
    n_clusters: int
    outcome_stage: IteratedFit | None = None
    treatment_stage: IteratedFit | None = None

    @property
    def n_selected(self) -> int:
        return len(self.selected)


@dataclass
class WaldResult:
    reject: bool
    tstat: float
    critical: float
    level: float
    null: float
    se_kind: str


# ---------------------------------------------------------------------------
# sandwich cores
# ---------------------------------------------------------------------------

def iv_sandwich(
    y: np.ndarray, d: np.ndarray, instrument: np.ndarray, starts: np.ndarray
) -> tuple[float, float, float]:
    """Scalar IV with a single (possibly constructed) instrument.

    alpha = (sum instrument * y) / (sum d * instrument); the variance
    sandwiches the within-cluster sums of instrument * residual between
    1/Q factors.  Returns (alpha, clustered se, heteroscedastic se).
    """
    N = y.shape[0]
    Q = float(d @ instrument) / N
    if abs(Q) < _DEGENERACY_TOL:
        raise RankFailure(
            f"treatment and instrument are essentially orthogonal (Q = {Q:.3e})"
        )
    alpha = float(instrument @ y) / N / Q
    resid = y - alpha * d
    score = instrument * resid
    v_clustered = clustered_meat(score, score, starts) / (Q * Q)
    v_rowwise = float(score @ score) / N / (Q * Q)
    return alpha, float(np.sqrt(v_clustered / N)), float(np.sqrt(v_rowwise / N))


def slope_sandwich(
    y: np.ndarray, x: np.ndarray, starts: np.ndarray
) -> tuple[float, float, float]:
    """Simple-regression slope of y on x with clustered and row-wise sandwiches."""
    N = y.shape[0]
    Q = float(x @ x) / N
    if Q < _DEGENERACY_TOL:
        raise RankFailure(f"regressor has no variation (Q = {Q:.3e})")
    alpha = float(x @ y) / N / Q
    resid = y - alpha * x
    score = x * resid
    v_clustered = clustered_meat(score, score, starts) / (Q * Q)
    v_rowwise = float(score @ score) / N / (Q * Q)
    return alpha, float(np.sqrt(v_clustered / N)), float(np.sqrt(v_rowwise / N))


def _drop_collinear(W: np.ndarray) -> tuple[list[int], list[int]]:
    """Greedy order-stable split of columns into kept and dropped-for-collinearity.

    Walks columns left to right; a column whose residual variance after
    projection on the already-kept columns falls below a relative tolerance
    duplicates earlier information and is dropped.  Column order therefore
    decides which of two duplicates survives: the later one goes.
    """
    G = W.T @ W
    m = G.shape[0]
    kept: list[int] = []
    dropped: list[int] = []
    for k in range(m):
        gkk = G[k, k]
        if gkk <= 0.0:
            dropped.append(k)
            continue
        if kept:
            sub = G[np.ix_(kept, kept)]
            cross = G[np.ix_(kept, [k])].ravel()
            try:
                coef = np.linalg.solve(sub, cross)
            except np.linalg.LinAlgError:
                coef, *_ = np.linalg.lstsq(sub, cross, rcond=None)
            r2 = gkk - float(cross @ coef)
        else:
            r2 = gkk
        if r2 <= _COLLINEARITY_TOL * gkk:
            dropped.append(k)
        else:
            kept.append(k)
    return kept, dropped


def pds_sandwich(
    y: np.ndarray,
    d: np.ndarray,
    controls: np.ndarray,
    starts: np.ndarray,
) -> tuple[float, float, float, tuple[int, ...]]:
    """Final double-selection OLS of y on (d, controls) with sandwich SEs.

    The treatment enters first and is never dropped; later control columns
    that duplicate earlier ones are removed with a warning.  Returns
    (alpha, clustered se, row-wise se, dropped control indices).
    """
    N = y.shape[0]
    m = 1 + controls.shape[1]
    if m >= N:
        raise RankFailure(
            f"final regression has {m} columns for {N} rows; cannot identify"
        )
    W = np.column_stack([d, controls]) if controls.shape[1] else d.reshape(-1, 1)
    kept, dropped = _drop_collinear(W)
    if 0 not in kept:
        raise RankFailure("treatment column has no variation in the final regression")
    if dropped:
        warnings.warn(
            f"dropped {len(dropped)} collinear control column(s) from the final "
            f"regression (positions {dropped})",
            stacklevel=3,
        )
    Wk = W[:, kept]
    coef, *_ = np.linalg.lstsq(Wk, y, rcond=None)
    alpha = float(coef[0])
    zeta = y - Wk @ coef

    if controls.shape[1]:
        bm, *_ = np.linalg.lstsq(controls, d, rcond=None)
        u = d - controls @ bm
    else:
        u = d.copy()
    Q = float(u @ u) / N
    if Q < _DEGENERACY_TOL:
        raise RankFailure(
            "treatment is collinear with the selected controls (first-stage "
            f"residual variance {Q:.3e})"
        )
    score = u * zeta
    v_clustered = clustered_meat(score, score, starts) / (Q * Q)
    v_rowwise = float(score @ score) / N / (Q * Q)
    # dropped indices are positions within `controls`, not counting the treatment
    dropped_controls = tuple(k - 1 for k in dropped if k > 0)
    return alpha, float(np.sqrt(v_clustered / N)), float(np.sqrt(v_rowwise / N)), dropped_controls


def projection_fitted(
    Z: np.ndarray, target: np.ndarray, gram_cho=None
) -> np.ndarray:
    """Fitted values of target on the full column span of Z.

    ``gram_cho`` may carry a prefactorized Cholesky of Z'Z (scipy
    ``cho_factor`` output) when many targets are projected on one design.
    """
    if gram_cho is not None:
        from scipy.linalg import cho_solve

        return Z @ cho_solve(gram_cho, Z.T @ target)
    coef, *_ = np.linalg.lstsq(Z, target, rcond=None)
    return Z @ coef


# ---------------------------------------------------------------------------
# pipelines on prepared arrays
# ---------------------------------------------------------------------------

def fit_iv_arrays(
    y: np.ndarray,
    d: np.ndarray,
    Z: np.ndarray,
    starts: np.ndarray,
    config: PenaltyConfig | None = None,
    excluded: tuple[int, ...] = (),
    gram: np.ndarray | None = None,
    names: tuple | None = None,
) -> IVEstimate:
    """Instrument-selection IV on demeaned arrays.

    Penalized selection runs on the first stage (d on Z); the treatment is
    then instrumented with the OLS refit fitted values on the selected set.
    An empty selection returns a flagged estimate rather than raising.
    """
    if config is None:
        config = PenaltyConfig()
    stage = iterate_loadings(Z, d, starts, config, excluded=excluded, gram=gram)
    n_clusters = len(starts) - 1
    label = (lambda j: names[j]) if names is not None else (lambda j: j)
    if stage.fit.is_empty:
        return IVEstimate(
            alpha=float("nan"), se_clustered=float("nan"), se_heteroscedastic=float("nan"),
            selected=(), no_instruments=True, lam=stage.lam,
            n_obs=y.shape[0], n_clusters=n_clusters, first_stage=stage,
        )
    dhat = stage.post.fitted
    alpha, se_c, se_h = iv_sandwich(y, d, dhat, starts)
    return IVEstimate(
        alpha=alpha, se_clustered=se_c, se_heteroscedastic=se_h,
        selected=tuple(label(j) for j in stage.support), no_instruments=False,
        lam=stage.lam, n_obs=y.shape[0], n_clusters=n_clusters, first_stage=stage,
    )


def fit_pds_arrays(
    y: np.ndarray,
    d: np.ndarray,
    X: np.ndarray,
    starts: np.ndarray,
    config: PenaltyConfig | None = None,
    excluded: tuple[int, ...] = (),
    gram: np.ndarray | None = None,
    names: tuple | None = None,
) -> PDSEstimate:
    """Double selection on demeaned arrays.

    Controls selected for the outcome equation and for the treatment
    equation are pooled; the final OLS regresses the outcome on the
    treatment plus the pooled set.  Standard errors are built from the
    treatment's first-stage residual against the pooled controls.
    """
    if config is None:
        config = PenaltyConfig()
    outcome_stage = iterate_loadings(X, y, starts, config, excluded=excluded, gram=gram)
    treatment_stage = iterate_loadings(X, d, starts, config, excluded=excluded, gram=gram)
    union = tuple(sorted(set(outcome_stage.support) | set(treatment_stage.support)))
    alpha, se_c, se_h, dropped_local = pds_sandwich(y, d, X[:, union], starts)
    label = (lambda j: names[j]) if names is not None else (lambda j: j)
    dropped = tuple(label(union[k]) for k in dropped_local)
    return PDSEstimate(
        alpha=alpha, se_clustered=se_c, se_heteroscedastic=se_h,
        selected=tuple(label(j) for j in union),
        selected_outcome=tuple(label(j) for j in outcome_stage.support),
        selected_treatment=tuple(label(j) for j in treatment_stage.support),
        dropped_collinear=dropped,
        lam=outcome_stage.lam, n_obs=y.shape[0], n_clusters=len(starts) - 1,
        outcome_stage=outcome_stage, treatment_stage=treatment_stage,
    )


# ---------------------------------------------------------------------------
# panel-level entry points
# ---------------------------------------------------------------------------

def _prepare(panel: PanelData, y_col: str | None):
    dm = within_demean(panel)
    if dm.weights is not None:
        dm = apply_cluster_weights(dm)
    if y_col is not None:
        y = dm.column(y_col)
    elif dm.y is not None:
        y = dm.y
    else:
        raise SchemaError("no outcome: pass y_col or construct PanelData with y")
    return dm, y


def _resolve_excluded(dm, candidate_names: list[str]) -> tuple[int, ...]:
    zero_var = {dm.column_names[j] for j in dm.zero_variance_columns}
    return tuple(k for k, name in enumerate(candidate_names) if name in zero_var)


def fit_iv(
    panel: PanelData,
    y_col: str | None,
    d_col: str,
    instrument_cols,
    config: PenaltyConfig | None = None,
) -> IVEstimate:
    """Instrument-selection IV on a raw panel.

    Demeans every variable within clusters (and applies cluster weights when
    the panel carries them), then selects instruments for ``d_col`` and
    estimates its effect on the outcome.
    """
    names = list(instrument_cols)
    if d_col in names:
        raise SchemaError(f"treatment column {d_col!r} listed among the instruments")
    dm, y = _prepare(panel, y_col)
    d = dm.column(d_col)
    Z = dm.columns(names)
    return fit_iv_arrays(
        y, d, Z, dm.cluster_starts, config,
        excluded=_resolve_excluded(dm, names), names=tuple(names),
    )


def fit_pds(
    panel: PanelData,
    y_col: str | None,
    d_col: str,
    control_cols,
    config: PenaltyConfig | None = None,
) -> PDSEstimate:
    """Double-selection estimate on a raw panel."""
    names = list(control_cols)
    if d_col in names:
        raise SchemaError(f"treatment column {d_col!r} listed among the controls")
    dm, y = _prepare(panel, y_col)
    d = dm.column(d_col)
    X = dm.columns(names)
    for k, name in enumerate(names):
        if np.array_equal(X[:, k], d):
            raise SchemaError(
                f"control column {name!r} duplicates the treatment column {d_col!r}"
            )
    return fit_pds_arrays(
        y, d, X, dm.cluster_starts, config,
        excluded=_resolve_excluded(dm, names), names=tuple(names),
    )


def wald_test(
    estimate: IVEstimate | PDSEstimate,
    null: float = 0.0,
    level: float = 0.05,
    se_kind: str = "clustered",
) -> WaldResult:
    """Two-sided test of alpha = null; rejects on strict exceedance only.

    A no-instrument IV estimate cannot reject: the conservative fallback
    reports reject = False with an undefined statistic.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if se_kind == "clustered":
        se = estimate.se_clustered
    elif se_kind == "heteroscedastic":
        se = estimate.se_heteroscedastic
    else:
        raise ValueError(f"se_kind must be 'clustered' or 'heteroscedastic', got {se_kind!r}")
    critical = normal_quantile(1.0 - level / 2.0)
    if getattr(estimate, "no_instruments", False):
        return WaldResult(
            reject=False, tstat=float("nan"), critical=critical,
            level=level, null=null, se_kind=se_kind,
        )
    if not np.isfinite(se) or se <= 0.0:
        raise ValueError(f"standard error must be positive and finite, got {se}")
    tstat = (estimate.alpha - null) / se
    return WaldResult(
        reject=bool(abs(tstat) > critical), tstat=float(tstat), critical=critical,
        level=level, null=null, se_kind=se_kind,
    )
