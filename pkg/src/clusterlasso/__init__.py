"""Cluster-robust Lasso selection and post-selection inference for panels.

The package removes additive cluster effects by within-cluster demeaning,
selects covariates or instruments with a Lasso whose penalty loadings sum
scores within clusters (making selection robust to arbitrary within-cluster
dependence), and delivers treatment-effect estimates with cluster-robust
standard errors through two routes: instrument selection for endogenous
treatments, and double selection for exogenous treatments with many
controls.  A Monte Carlo harness and a command line front end sit on top.
"""

from .panel import (
    DemeanedPanel,
    PanelData,
    SchemaError,
    apply_cluster_weights,
    clustered_meat,
    load_csv,
    within_demean,
)
from .penalty import (
    ConvergenceError,
    IteratedFit,
    Loadings,
    PenaltyConfig,
    default_gamma,
    ideal_loadings,
    initial_loadings,
    iterate_loadings,
    normal_quantile,
    penalty_level,
    refined_loadings,
    regularization_event_check,
)
from .solver import LassoFit, LassoProblem, PostLassoFit, post_lasso, solve_lasso
from .estimators import (
    IVEstimate,
    PDSEstimate,
    RankFailure,
    fit_iv,
    fit_pds,
    wald_test,
)

__version__ = "0.1.0"

__all__ = [
    "DemeanedPanel",
    "PanelData",
    "SchemaError",
    "apply_cluster_weights",
    "clustered_meat",
    "load_csv",
    "within_demean",
    "ConvergenceError",
    "IteratedFit",
    "Loadings",
    "PenaltyConfig",
    "default_gamma",
    "ideal_loadings",
    "initial_loadings",
    "iterate_loadings",
    "normal_quantile",
    "penalty_level",
    "refined_loadings",
    "regularization_event_check",
    "LassoFit",
    "LassoProblem",
    "PostLassoFit",
    "post_lasso",
    "solve_lasso",
    "IVEstimate",
    "PDSEstimate",
    "RankFailure",
    "fit_iv",
    "fit_pds",
    "wald_test",
    "__version__",
]
