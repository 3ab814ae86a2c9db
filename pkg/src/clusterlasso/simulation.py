"""Monte Carlo harness for the panel selection estimators.

Two data generating processes share one backbone: n clusters observed over
T periods, cluster effects correlated across clusters, a large dictionary
of serially correlated candidate columns built around those effects, and
AR(1) disturbance pairs.  The "iv" model makes the treatment endogenous and
uses the dictionary as instruments; the "plm" model keeps the treatment
exogenous and uses the dictionary as controls entering both equations.

The candidate columns and cluster effects are drawn once per study and held
fixed; disturbances are redrawn each replication from a dedicated RNG
stream keyed by the replication index, so results are reproducible and
independent of how replications are distributed over worker processes.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, toeplitz

from .estimators import (
    RankFailure,
    fit_iv_arrays,
    fit_pds_arrays,
    iv_sandwich,
    slope_sandwich,
)
from .penalty import (
    ConvergenceError,
    PenaltyConfig,
    ideal_loadings,
    normal_quantile,
    penalty_level,
    regularization_event_check,
)

TREATMENT_EFFECT = 0.5
RHO_EPS = 0.8
RHO_U = 0.8
RHO_Z = 0.8
NU_CORR_IV = 0.5
NU_CORR_PLM = 0.0

P_MODES = ("T-2", "T+2")
IV_ESTIMATORS = ("clustered", "heteroscedastic", "all", "oracle", "fe_oracle")
PLM_ESTIMATORS = ("clustered", "heteroscedastic", "all", "oracle", "fe_oracle", "select_over_fe")

DISPLAY_NAMES = {
    "clustered": "Clustered Loadings",
    "heteroscedastic": "Heteroscedastic Loadings",
    "all": "All",
    "oracle": "Oracle",
    "fe_oracle": "FE Oracle",
    "select_over_fe": "Select over FE",
}

WORKERS_ENV_VAR = "CLUSTERLASSO_WORKERS"


@dataclass(frozen=True)
class SimulationSpec:
    """One Monte Carlo study: model, design, size, and run controls."""

    model: str
    design: int
    n: int
    replications: int
    seed: int
    T: int = 10
    p_mode: str = "T-2"
    estimators: tuple[str, ...] = ()
    level: float = 0.05
    truncation: float = 10_000.0
    design_seed: int | None = None

    def __post_init__(self) -> None:
        if self.model not in ("iv", "plm"):
            raise ValueError(f"model must be 'iv' or 'plm', got {self.model!r}")
        if self.design not in (1, 2, 3):
            raise ValueError(f"design must be 1, 2 or 3, got {self.design}")
        if self.n < 8:
            raise ValueError(f"need at least 8 clusters for the coefficient designs, got {self.n}")
        if self.T < 2:
            raise ValueError(f"need at least 2 periods, got {self.T}")
        if self.p_mode not in P_MODES:
            raise ValueError(f"p_mode must be one of {P_MODES}, got {self.p_mode!r}")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if self.truncation <= 0:
            raise ValueError("truncation bound must be positive")
        valid = IV_ESTIMATORS if self.model == "iv" else PLM_ESTIMATORS
        chosen = self.estimators if self.estimators else self._default_estimators()
        for name in chosen:
            if name not in valid:
                raise ValueError(
                    f"unknown estimator {name!r} for model {self.model!r}; valid: {valid}"
                )
        if "all" in chosen and not self.all_feasible:
            raise ValueError(
                f"estimator 'all' needs p <= N - n columns ({self.p} > {self.N - self.n}); "
                "it is excluded automatically when no estimator list is given"
            )
        object.__setattr__(self, "estimators", tuple(chosen))

    def _default_estimators(self) -> tuple[str, ...]:
        base = IV_ESTIMATORS if self.model == "iv" else PLM_ESTIMATORS
        return tuple(e for e in base if e != "all" or self.all_feasible)

    @property
    def p(self) -> int:
        return self.n * (self.T - 2) if self.p_mode == "T-2" else self.n * (self.T + 2)

    @property
    def N(self) -> int:
        return self.n * self.T

    @property
    def all_feasible(self) -> bool:
        # the unpenalized comparator inverts the demeaned Gram, which loses
        # one degree of freedom per cluster
        return self.p <= self.N - self.n

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "design": self.design,
            "n": self.n,
            "T": self.T,
            "p_mode": self.p_mode,
            "p": self.p,
            "replications": self.replications,
            "seed": self.seed,
            "design_seed": self.design_seed,
            "estimators": list(self.estimators),
            "level": self.level,
            "truncation": self.truncation,
            "treatment_effect": TREATMENT_EFFECT,
        }


# ---------------------------------------------------------------------------
# coefficient designs
# ---------------------------------------------------------------------------

def _half_cuberoot_floor(n: int) -> int:
    root = n ** (1.0 / 3.0)
    nearest = round(root)
    if nearest ** 3 == n:  # kill float fuzz at perfect cubes
        root = float(nearest)
    return int(math.floor(root / 2.0))


def coefficient_design(model: str, design: int, n: int, p: int) -> dict[str, np.ndarray]:
    """First-stage / control coefficient vectors for the three designs.

    All designs alternate signs.  Designs 1 and 2 put 1/sqrt(s) on the first
    s columns and a tail (quadratic decay or a flat 1/sqrt(p - s)) on the
    rest; design 3 is exactly sparse with a doubled block and no tail.  The
    "plm" design 1 tail switches on at column 3 regardless of s.
    """
    j = np.arange(1, p + 1, dtype=np.float64)
    signs = np.where(np.arange(p) % 2 == 0, 1.0, -1.0)
    s = _half_cuberoot_floor(n)
    if s < 1:
        raise ValueError(f"design block size is zero for n={n}")
    if model == "iv":
        if design == 1:
            pi = signs * (1.0 / math.sqrt(s) * (j <= s) + 1.0 / j**2 * (j > s))
        elif design == 2:
            pi = signs * (1.0 / math.sqrt(s) * (j <= s) + 1.0 / math.sqrt(p - s) * (j > s))
        else:
            s = 2 * s
            pi = signs * (1.0 / math.sqrt(s) * (j <= s))
        return {"pi": pi}
    if design == 1:
        gamma = signs * (1.0 / math.sqrt(s) * (j <= s) + 1.0 / j**2 * (j > 2))
        beta = gamma.copy()
    elif design == 2:
        gamma = signs * (1.0 / math.sqrt(s) * (j <= s) + 1.0 / math.sqrt(p - s) * (j > s))
        beta = signs * (1.0 / math.sqrt(s) * (j <= s) + 1.0 / j**2 * (j > s))
    else:
        s = 2 * s
        gamma = signs * (1.0 / math.sqrt(s) * (j <= s))
        beta = gamma.copy()
    return {"beta": beta, "gamma": gamma}


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------

@dataclass
class FixedDesign:
    """Cluster effects and candidate columns, drawn once and conditioned on."""

    e: np.ndarray  # (n,) cluster effects; also the treatment-equation effects
    Z: np.ndarray  # (N, p) candidate columns, rows ordered cluster-major


def _design_rng(spec: SimulationSpec) -> np.random.Generator:
    seed = spec.design_seed if spec.design_seed is not None else spec.seed
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def _replication_rng(spec: SimulationSpec, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 1, rep]))


def generate_fixed_design(spec: SimulationSpec) -> FixedDesign:
    """Draw cluster effects and candidate columns.

    Effects: e ~ N(0, (4/T) * C) with C_ij = 0.5^|i-j| across the cluster
    index.  Columns: within each row (i, t), innovations are correlated
    across columns with the same 0.5^|j-k| profile; over time each column
    follows z_it = e_i + rho_z z_i,t-1 + phi_it started from its stationary
    distribution given e_i, so every column is anchored on the cluster
    effect.
    """
    rng = _design_rng(spec)
    n, T, p = spec.n, spec.T, spec.p
    L_e = cholesky(toeplitz(0.5 ** np.arange(n)), lower=True)
    e = (2.0 / math.sqrt(T)) * (L_e @ rng.standard_normal(n))

    L_p = cholesky(toeplitz(0.5 ** np.arange(p)), lower=True)
    phi = rng.standard_normal((n * T, p)) @ L_p.T

    Z = np.empty((n, T, p))
    phi = phi.reshape(n, T, p)
    e_col = e[:, None]
    Z[:, 0, :] = e_col / (1.0 - RHO_Z) + math.sqrt(1.0 / (1.0 - RHO_Z**2)) * phi[:, 0, :]
    for t in range(1, T):
        Z[:, t, :] = e_col + RHO_Z * Z[:, t - 1, :] + phi[:, t, :]
    return FixedDesign(e=e, Z=np.ascontiguousarray(Z.reshape(n * T, p)))


@dataclass
class Replication:
    y: np.ndarray
    d: np.ndarray
    eps: np.ndarray  # outcome-equation disturbances
    u: np.ndarray    # treatment-equation disturbances


def _draw_disturbances(rng: np.random.Generator, n: int, T: int, nu_corr: float):
    """Jointly stationary AR(1) pair with correlated innovations.

    The period-0 pair is drawn from the stationary joint law — variances
    1/(1-rho^2) and cross-covariance nu_corr/(1 - rho_eps*rho_u) — so every
    retained period is stationary.
    """
    var_e0 = 1.0 / (1.0 - RHO_EPS**2)
    var_u0 = 1.0 / (1.0 - RHO_U**2)
    cov_0 = nu_corr / (1.0 - RHO_EPS * RHO_U)
    z0 = rng.standard_normal((2, n))
    eps_prev = math.sqrt(var_e0) * z0[0]
    corr0 = cov_0 / math.sqrt(var_e0 * var_u0)
    u_prev = math.sqrt(var_u0) * (corr0 * z0[0] + math.sqrt(1.0 - corr0**2) * z0[1])

    shocks = rng.standard_normal((T, 2, n))
    eps = np.empty((n, T))
    u = np.empty((n, T))
    root = math.sqrt(1.0 - nu_corr**2)
    for t in range(T):
        nu1 = shocks[t, 0]
        nu2 = nu_corr * nu1 + root * shocks[t, 1]
        eps_prev = RHO_EPS * eps_prev + nu1
        u_prev = RHO_U * u_prev + nu2
        eps[:, t] = eps_prev
        u[:, t] = u_prev
    return eps.reshape(-1), u.reshape(-1)


def generate_replication(
    spec: SimulationSpec, design: FixedDesign, coeffs: dict[str, np.ndarray], rep: int
) -> Replication:
    """Treatment and outcome for replication ``rep`` given the fixed design."""
    rng = _replication_rng(spec, rep)
    nu_corr = NU_CORR_IV if spec.model == "iv" else NU_CORR_PLM
    eps, u = _draw_disturbances(rng, spec.n, spec.T, nu_corr)
    effects = np.repeat(design.e, spec.T)
    if spec.model == "iv":
        d = design.Z @ coeffs["pi"] + effects + u
        y = TREATMENT_EFFECT * d + effects + eps
    else:
        d = design.Z @ coeffs["gamma"] + effects + u
        y = TREATMENT_EFFECT * d + design.Z @ coeffs["beta"] + effects + eps
    return Replication(y=y, d=d, eps=eps, u=u)


def _demean_balanced(v: np.ndarray, n: int, T: int) -> np.ndarray:
    m = v.reshape(n, T)
    return (m - m.mean(axis=1, keepdims=True)).reshape(-1)


# ---------------------------------------------------------------------------
# study context: everything computable before the replication loop
# ---------------------------------------------------------------------------

@dataclass
class StudyContext:
    spec: SimulationSpec
    design: FixedDesign
    coeffs: dict[str, np.ndarray]
    starts: np.ndarray
    Z_dm: np.ndarray
    gram_dm: np.ndarray | None = None
    cho_dm: tuple | None = None
    signal_raw: np.ndarray | None = None   # iv: Z pi
    signal_dm: np.ndarray | None = None    # iv: demeaned Z pi
    zbeta_dm: np.ndarray | None = None     # plm: demeaned Z beta
    zgamma_dm: np.ndarray | None = None    # plm: demeaned Z gamma
    zbeta_raw: np.ndarray | None = None
    zgamma_raw: np.ndarray | None = None
    X_aug: np.ndarray | None = None        # select_over_fe dictionary, grand-centered
    gram_aug: np.ndarray | None = None
    effects: np.ndarray | None = None      # cluster effects repeated to rows


def build_context(spec: SimulationSpec) -> StudyContext:
    design = generate_fixed_design(spec)
    coeffs = coefficient_design(spec.model, spec.design, spec.n, spec.p)
    n, T, N = spec.n, spec.T, spec.N
    starts = np.arange(0, N + 1, T, dtype=np.int64)
    Z_dm = np.ascontiguousarray(
        (design.Z.reshape(n, T, spec.p) - design.Z.reshape(n, T, spec.p).mean(axis=1, keepdims=True))
        .reshape(N, spec.p)
    )
    ctx = StudyContext(
        spec=spec, design=design, coeffs=coeffs, starts=starts, Z_dm=Z_dm,
        effects=np.repeat(design.e, T),
    )
    wants = set(spec.estimators)
    if wants & {"clustered", "heteroscedastic"}:
        ctx.gram_dm = Z_dm.T @ Z_dm
    if "all" in wants:
        gram = ctx.gram_dm if ctx.gram_dm is not None else Z_dm.T @ Z_dm
        ctx.cho_dm = cho_factor(gram, lower=True)
    if spec.model == "iv":
        ctx.signal_raw = design.Z @ coeffs["pi"]
        ctx.signal_dm = _demean_balanced(ctx.signal_raw, n, T)
    else:
        ctx.zbeta_raw = design.Z @ coeffs["beta"]
        ctx.zgamma_raw = design.Z @ coeffs["gamma"]
        ctx.zbeta_dm = _demean_balanced(ctx.zbeta_raw, n, T)
        ctx.zgamma_dm = _demean_balanced(ctx.zgamma_raw, n, T)
    if "select_over_fe" in wants:
        dummies = np.zeros((N, n))
        rows = np.arange(N)
        dummies[rows, rows // T] = 1.0
        aug = np.column_stack([design.Z, dummies])
        aug -= aug.mean(axis=0, keepdims=True)
        ctx.X_aug = np.ascontiguousarray(aug)
        ctx.gram_aug = aug.T @ aug
    return ctx


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------

@dataclass
class EstimatorRecord:
    status: str  # "ok" | "no_selection" | "failed"
    alpha: float = float("nan")
    se_clustered: float = float("nan")
    se_heteroscedastic: float = float("nan")
    n_selected: int | None = None


def _record_iv(est) -> EstimatorRecord:
    if est.no_instruments:
        return EstimatorRecord(status="no_selection", n_selected=0)
    return EstimatorRecord(
        status="ok", alpha=est.alpha, se_clustered=est.se_clustered,
        se_heteroscedastic=est.se_heteroscedastic, n_selected=est.n_selected,
    )


def _run_replication(ctx: StudyContext, rep: int) -> dict[str, EstimatorRecord]:
    spec = ctx.spec
    n, T = spec.n, spec.T
    data = generate_replication(spec, ctx.design, ctx.coeffs, rep)
    y_dm = _demean_balanced(data.y, n, T)
    d_dm = _demean_balanced(data.d, n, T)
    starts = ctx.starts
    out: dict[str, EstimatorRecord] = {}

    for name in spec.estimators:
        try:
            if name in ("clustered", "heteroscedastic"):
                config = PenaltyConfig(loading_mode=name)
                if spec.model == "iv":
                    est = fit_iv_arrays(y_dm, d_dm, ctx.Z_dm, starts, config, gram=ctx.gram_dm)
                    out[name] = _record_iv(est)
                else:
                    est = fit_pds_arrays(y_dm, d_dm, ctx.Z_dm, starts, config, gram=ctx.gram_dm)
                    out[name] = EstimatorRecord(
                        status="ok", alpha=est.alpha, se_clustered=est.se_clustered,
                        se_heteroscedastic=est.se_heteroscedastic, n_selected=est.n_selected,
                    )
            elif name == "all":
                if spec.model == "iv":
                    dhat = ctx.Z_dm @ cho_solve(ctx.cho_dm, ctx.Z_dm.T @ d_dm)
                    alpha, se_c, se_h = iv_sandwich(y_dm, d_dm, dhat, starts)
                else:
                    u = d_dm - ctx.Z_dm @ cho_solve(ctx.cho_dm, ctx.Z_dm.T @ d_dm)
                    y_perp = y_dm - ctx.Z_dm @ cho_solve(ctx.cho_dm, ctx.Z_dm.T @ y_dm)
                    alpha, se_c, se_h = slope_sandwich(y_perp, u, starts)
                out[name] = EstimatorRecord(status="ok", alpha=alpha, se_clustered=se_c,
                                            se_heteroscedastic=se_h)
            elif name == "oracle":
                if spec.model == "iv":
                    alpha, se_c, se_h = iv_sandwich(y_dm, d_dm, ctx.signal_dm, starts)
                else:
                    alpha, se_c, se_h = slope_sandwich(
                        y_dm - ctx.zbeta_dm, d_dm - ctx.zgamma_dm, starts
                    )
                out[name] = EstimatorRecord(status="ok", alpha=alpha, se_clustered=se_c,
                                            se_heteroscedastic=se_h)
            elif name == "fe_oracle":
                if spec.model == "iv":
                    alpha, se_c, se_h = iv_sandwich(
                        data.y - ctx.effects, data.d, ctx.signal_raw, starts
                    )
                else:
                    alpha, se_c, se_h = slope_sandwich(
                        data.y - ctx.zbeta_raw - ctx.effects,
                        data.d - ctx.zgamma_raw - ctx.effects,
                        starts,
                    )
                out[name] = EstimatorRecord(status="ok", alpha=alpha, se_clustered=se_c,
                                            se_heteroscedastic=se_h)
            elif name == "select_over_fe":
                y_c = data.y - data.y.mean()
                d_c = data.d - data.d.mean()
                est = fit_pds_arrays(y_c, d_c, ctx.X_aug, starts, PenaltyConfig(),
                                     gram=ctx.gram_aug)
                out[name] = EstimatorRecord(
                    status="ok", alpha=est.alpha, se_clustered=est.se_clustered,
                    se_heteroscedastic=est.se_heteroscedastic, n_selected=est.n_selected,
                )
            else:  # pragma: no cover - guarded by spec validation
                raise ValueError(f"unknown estimator {name!r}")
        except (RankFailure, ConvergenceError):
            out[name] = EstimatorRecord(status="failed")
    return out


# ---------------------------------------------------------------------------
# the study driver
# ---------------------------------------------------------------------------

_WORKER_CTX: StudyContext | None = None


def _worker_chunk(bounds: tuple[int, int]):
    lo, hi = bounds
    ctx = _WORKER_CTX
    return [(_run_replication(ctx, r)) for r in range(lo, hi)]


@dataclass
class MonteCarloReport:
    spec: dict
    estimators: dict[str, dict]

    def to_json(self) -> str:
        payload = {"spec": self.spec, "estimators": self.estimators}
        return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"

    def text_table(self) -> str:
        spec = self.spec
        head = (
            f"model={spec['model']} design={spec['design']} n={spec['n']} T={spec['T']} "
            f"p={spec['p']} replications={spec['replications']} seed={spec['seed']}"
        )
        cols = ["bias", "rmse", "size(cluster)", "size(het)", "no-sel", "cond-out", "trunc"]
        name_w = max(len(DISPLAY_NAMES[k]) for k in self.estimators)
        name_w = max(name_w, len("estimator"))
        widths = [max(len(c), 13 if c in ("size(cluster)",) else 9) for c in cols]
        lines = [head, ""]
        header = "estimator".ljust(name_w) + "".join(
            c.rjust(w + 2) for c, w in zip(cols, widths)
        )
        lines.append(header)
        lines.append("-" * len(header))

        def fmt(value, width, kind):
            if value is None:
                return "n/a".rjust(width + 2)
            if kind == "f":
                return f"{value:.3f}".rjust(width + 2)
            return f"{value:d}".rjust(width + 2)

        for key, stats in self.estimators.items():
            row = DISPLAY_NAMES[key].ljust(name_w)
            row += fmt(stats["bias"], widths[0], "f")
            row += fmt(stats["rmse"], widths[1], "f")
            row += fmt(stats["size_clustered"], widths[2], "f")
            row += fmt(stats["size_heteroscedastic"], widths[3], "f")
            row += fmt(stats["no_selection"], widths[4], "d")
            row += fmt(stats["conditioned_out"], widths[5], "d")
            row += fmt(stats["truncated"], widths[6], "d")
            lines.append(row)
        return "\n".join(lines) + "\n"


def _aggregate(spec: SimulationSpec, per_rep: list[dict[str, EstimatorRecord]]) -> MonteCarloReport:
    critical = normal_quantile(1.0 - spec.level / 2.0)
    reps = spec.replications
    stats: dict[str, dict] = {}
    for name in spec.estimators:
        records = [r[name] for r in per_rep]
        ok = [r for r in records if r.status == "ok"]
        no_sel = sum(1 for r in records if r.status == "no_selection")
        failed = sum(1 for r in records if r.status == "failed")
        entry: dict = {
            "no_selection": no_sel,
            "failed": failed,
            "conditioned_out": reps - len(ok),
            "defined": len(ok),
        }
        if ok:
            alphas = np.array([r.alpha for r in ok])
            clipped = np.clip(alphas, -spec.truncation, spec.truncation)
            entry["truncated"] = int(np.sum(clipped != alphas))
            entry["bias"] = float(np.mean(clipped) - TREATMENT_EFFECT)
            entry["rmse"] = float(np.sqrt(np.mean((clipped - TREATMENT_EFFECT) ** 2)))
        else:
            entry["truncated"] = 0
            entry["bias"] = None
            entry["rmse"] = None
        # tests at the true effect: undefined replications cannot reject
        for se_attr, key in (
            ("se_clustered", "size_clustered"),
            ("se_heteroscedastic", "size_heteroscedastic"),
        ):
            rejections = 0
            for r in ok:
                se = getattr(r, se_attr)
                if se > 0 and np.isfinite(se):
                    rejections += abs(r.alpha - TREATMENT_EFFECT) / se > critical
            entry[key] = rejections / reps
        sel_counts = [r.n_selected for r in records if r.n_selected is not None]
        entry["mean_selected"] = float(np.mean(sel_counts)) if sel_counts else None
        stats[name] = entry
    return MonteCarloReport(spec=spec.as_dict(), estimators=stats)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV_VAR, "")
        workers = int(env) if env.strip() else 1
    if workers < 1:
        raise ValueError(f"worker count must be positive, got {workers}")
    return workers


def run_monte_carlo(spec: SimulationSpec, workers: int | None = None) -> MonteCarloReport:
    """Run the full study and aggregate.

    Replication r always draws from the stream keyed (seed, r), so reports
    are identical byte for byte no matter how many workers split the loop.
    """
    workers = resolve_workers(workers)
    ctx = build_context(spec)
    reps = spec.replications
    if workers == 1 or reps < 4:
        per_rep = [_run_replication(ctx, r) for r in range(reps)]
    else:
        bounds = []
        chunk = (reps + workers - 1) // workers
        for lo in range(0, reps, chunk):
            bounds.append((lo, min(lo + chunk, reps)))
        global _WORKER_CTX
        _WORKER_CTX = ctx
        try:
            mp_ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=mp_ctx) as pool:
                chunks = list(pool.map(_worker_chunk, bounds))
        finally:
            _WORKER_CTX = None
        per_rep = [rec for chunk_records in chunks for rec in chunk_records]
    return _aggregate(spec, per_rep)


# ---------------------------------------------------------------------------
# penalty-domination diagnostics
# ---------------------------------------------------------------------------

def regularization_event_frequency(
    spec: SimulationSpec, c: float = 1.1, gamma: float | None = None
) -> tuple[float, float]:
    """Share of replications where the penalty dominates the ideal-loading score.

    Uses the treatment-equation disturbances (the equation selection runs
    on) and loadings computed from the true demeaned disturbances.  Returns
    (frequency, gamma used).
    """
    ctx = build_context(spec)
    N, p = spec.N, spec.p
    lam_gamma = gamma if gamma is not None else 0.1 / math.log(max(p, N))
    lam = penalty_level(N, p, c, lam_gamma)
    hits = 0
    for rep in range(spec.replications):
        data = generate_replication(spec, ctx.design, ctx.coeffs, rep)
        u_dm = _demean_balanced(data.u, spec.n, spec.T)
        phi = ideal_loadings(ctx.Z_dm, u_dm, ctx.starts)
        hits += regularization_event_check(ctx.Z_dm, u_dm, lam, phi, c)
    return hits / spec.replications, lam_gamma
