"""Command line front end: CSV estimation and Monte Carlo studies.

Three subcommands share one executable.  ``fit-iv`` and ``fit-pds`` read a
long-format CSV, within-demean it, run the penalized selection estimators
and print a small report (table or JSON; the JSON validates against the
schema files shipped under ``clusterlasso/schemas/``).  ``simulate`` runs a
Monte Carlo study and emits its aggregate report.

Exit codes: 0 success, 2 bad input (missing columns, malformed CSV, invalid
study parameters), 3 numerically degenerate estimation (rank failure or a
selection solve that did not converge).
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import math
import sys

from .estimators import IVEstimate, PDSEstimate, RankFailure, fit_iv, fit_pds
from .panel import PanelData, SchemaError, load_csv
from .penalty import ConvergenceError, LOADING_MODES, PenaltyConfig, REFIT_MODES, normal_quantile
from .simulation import P_MODES, SimulationSpec, run_monte_carlo

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_DEGENERATE = 3

_GLOB_CHARS = set("*?[")


def _finite_or_none(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def _resolve_columns(panel: PanelData, patterns, reserved: set, what: str) -> list[str]:
    """Expand explicit names and globs against the CSV header.

    With no patterns, every column except the reserved (outcome/treatment)
    ones is a candidate.  Globs skip reserved columns; explicit names pass
    through untouched so the estimator can report a precise conflict.
    """
    names = panel.column_names
    if not patterns:
        return [c for c in names if c not in reserved]
    out: list[str] = []
    for pat in patterns:
        if _GLOB_CHARS & set(pat):
            hits = [c for c in names if fnmatch.fnmatchcase(c, pat) and c not in reserved]
            if not hits:
                raise SchemaError(f"{what} pattern {pat!r} matches no data column")
        else:
            if pat not in names:
                raise SchemaError(f"no {what} column named {pat!r} in the data")
            hits = [pat]
        for c in hits:
            if c not in out:
                out.append(c)
    return out


def _penalty_config(args) -> PenaltyConfig:
    return PenaltyConfig(
        c=args.c,
        gamma=args.gamma,
        K=args.rounds,
        refit_mode=args.refit,
        loading_mode=args.loadings,
    )


def _interval(alpha: float, se: float, level: float) -> tuple[float | None, float | None]:
    if not (math.isfinite(alpha) and math.isfinite(se)):
        return None, None
    half = normal_quantile(1.0 - level / 2.0) * se
    return alpha - half, alpha + half


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))


def _name_list(names) -> str:
    return ", ".join(names) if names else "(none)"


# ---------------------------------------------------------------------------
# fit-iv
# ---------------------------------------------------------------------------

def _iv_payload(est: IVEstimate, level: float) -> dict:
    lo, hi = _interval(est.alpha, est.se_clustered, level)
    return {
        "command": "fit-iv",
        "alpha": _finite_or_none(est.alpha),
        "se_clustered": _finite_or_none(est.se_clustered),
        "se_heteroscedastic": _finite_or_none(est.se_heteroscedastic),
        "ci_lower": lo,
        "ci_upper": hi,
        "level": level,
        "no_instruments": est.no_instruments,
        "lambda": est.lam,
        "n_obs": est.n_obs,
        "n_clusters": est.n_clusters,
        "n_selected": est.n_selected,
        "selected": list(est.selected),
    }


def _iv_table(payload: dict) -> str:
    level = payload["level"]
    pct = f"{100 * (1 - level):g}%"
    lines = ["instrument-selection IV fit"]
    if payload["no_instruments"]:
        lines += [
            f"  lambda                {payload['lambda']:.6f}",
            f"  observations          {payload['n_obs']}  ({payload['n_clusters']} clusters)",
            "  no instruments selected: the penalty removed every candidate, so the",
            "  treatment effect is not identified in this fit and the test at level",
            f"  {100 * level:g}% does not reject the null.",
        ]
        return "\n".join(lines) + "\n"
    lines += [
        f"  alpha                 {payload['alpha']:.6f}",
        f"  se (clustered)        {payload['se_clustered']:.6f}",
        f"  se (heteroscedastic)  {payload['se_heteroscedastic']:.6f}",
        f"  {pct} CI  (clustered)  [{payload['ci_lower']:.6f}, {payload['ci_upper']:.6f}]",
        f"  lambda                {payload['lambda']:.6f}",
        f"  observations          {payload['n_obs']}  ({payload['n_clusters']} clusters)",
        f"  selected ({payload['n_selected']}): {_name_list(payload['selected'])}",
    ]
    return "\n".join(lines) + "\n"


def _cmd_fit_iv(args) -> int:
    panel = load_csv(args.data, cluster_col=args.cluster, time_col=args.time,
                     weight_col=args.weight_col)
    instruments = _resolve_columns(panel, args.instruments, {args.y, args.d}, "instrument")
    est = fit_iv(panel, args.y, args.d, instruments, _penalty_config(args))
    payload = _iv_payload(est, args.level)
    if args.format == "json":
        _print_json(payload)
    else:
        sys.stdout.write(_iv_table(payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-pds
# ---------------------------------------------------------------------------

def _pds_payload(est: PDSEstimate, level: float) -> dict:
    lo, hi = _interval(est.alpha, est.se_clustered, level)
    return {
        "command": "fit-pds",
        "alpha": est.alpha,
        "se_clustered": est.se_clustered,
        "se_heteroscedastic": est.se_heteroscedastic,
        "ci_lower": lo,
        "ci_upper": hi,
        "level": level,
        "lambda": est.lam,
        "n_obs": est.n_obs,
        "n_clusters": est.n_clusters,
        "n_selected": len(est.selected),
        "n_selected_outcome": len(est.selected_outcome),
        "n_selected_treatment": len(est.selected_treatment),
        "selected": list(est.selected),
        "selected_outcome": list(est.selected_outcome),
        "selected_treatment": list(est.selected_treatment),
        "dropped_collinear": list(est.dropped_collinear),
    }


def _pds_table(payload: dict) -> str:
    level = payload["level"]
    pct = f"{100 * (1 - level):g}%"
    lines = [
        "double-selection fit",
        f"  alpha                 {payload['alpha']:.6f}",
        f"  se (clustered)        {payload['se_clustered']:.6f}",
        f"  se (heteroscedastic)  {payload['se_heteroscedastic']:.6f}",
        f"  {pct} CI  (clustered)  [{payload['ci_lower']:.6f}, {payload['ci_upper']:.6f}]",
        f"  lambda                {payload['lambda']:.6f}",
        f"  observations          {payload['n_obs']}  ({payload['n_clusters']} clusters)",
        f"  selected for outcome ({payload['n_selected_outcome']}): "
        f"{_name_list(payload['selected_outcome'])}",
        f"  selected for treatment ({payload['n_selected_treatment']}): "
        f"{_name_list(payload['selected_treatment'])}",
        f"  selected union ({payload['n_selected']}): {_name_list(payload['selected'])}",
    ]
    if payload["dropped_collinear"]:
        lines.append(
            f"  dropped as collinear ({len(payload['dropped_collinear'])}): "
            f"{_name_list(payload['dropped_collinear'])}"
        )
    return "\n".join(lines) + "\n"


def _cmd_fit_pds(args) -> int:
    panel = load_csv(args.data, cluster_col=args.cluster, time_col=args.time,
                     weight_col=args.weight_col)
    controls = _resolve_columns(panel, args.controls, {args.y, args.d}, "control")
    est = fit_pds(panel, args.y, args.d, controls, _penalty_config(args))
    payload = _pds_payload(est, args.level)
    if args.format == "json":
        _print_json(payload)
    else:
        sys.stdout.write(_pds_table(payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    spec = SimulationSpec(
        model=args.model,
        design=args.design,
        n=args.n,
        replications=args.reps,
        seed=args.seed,
        T=args.T,
        p_mode=args.p_mode,
        estimators=args.estimators if args.estimators else (),
        level=args.level,
        truncation=args.truncation,
        design_seed=args.design_seed,
    )
    report = run_monte_carlo(spec, workers=args.workers)
    text = report.text_table()
    blob = report.to_json()
    if args.out:
        with open(args.out + ".json", "w") as fh:
            fh.write(blob)
        with open(args.out + ".txt", "w") as fh:
            fh.write(text)
    if args.format == "json":
        sys.stdout.write(blob)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_fit_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("data", help="long-format CSV with a header row")
    sub.add_argument("--y", required=True, help="outcome column name")
    sub.add_argument("--d", required=True, help="treatment column name")
    sub.add_argument("--cluster", default="cluster", help="cluster id column (default: cluster)")
    sub.add_argument("--time", default="time", help="time id column (default: time)")
    sub.add_argument("--weight-col", default=None, help="optional per-cluster weight column")
    sub.add_argument("--c", type=float, default=1.1, help="penalty slack constant (default: 1.1)")
    sub.add_argument("--gamma", type=float, default=None,
                     help="penalty confidence parameter (default: size-dependent)")
    sub.add_argument("--rounds", type=int, default=15,
                     help="loading refinement solves, initial one included (default: 15)")
    sub.add_argument("--refit", choices=REFIT_MODES, default="post-lasso",
                     help="residuals feeding refined loadings (default: post-lasso)")
    sub.add_argument("--loadings", choices=LOADING_MODES, default="clustered",
                     help="penalty loading style (default: clustered)")
    sub.add_argument("--level", type=float, default=0.05,
                     help="test size for the confidence interval (default: 0.05)")
    sub.add_argument("--format", choices=("table", "json"), default="table",
                     help="stdout rendering (default: table)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterlasso",
        description="Cluster-robust Lasso selection and post-selection inference for panels.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    iv = commands.add_parser("fit-iv", help="select instruments, then IV for the treatment effect")
    _add_fit_arguments(iv)
    iv.add_argument("--instruments", nargs="+", default=None, metavar="COL",
                    help="instrument columns, names or globs (default: all other columns)")
    iv.set_defaults(func=_cmd_fit_iv)

    pds = commands.add_parser("fit-pds", help="double selection over controls, then OLS")
    _add_fit_arguments(pds)
    pds.add_argument("--controls", nargs="+", default=None, metavar="COL",
                     help="control columns, names or globs (default: all other columns)")
    pds.set_defaults(func=_cmd_fit_pds)

    sim = commands.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--model", choices=("iv", "plm"), required=True)
    sim.add_argument("--design", type=int, required=True, help="coefficient design: 1, 2 or 3")
    sim.add_argument("--n", type=int, required=True, help="number of clusters")
    sim.add_argument("--T", type=int, default=10, dest="T", help="periods per cluster (default: 10)")
    sim.add_argument("--p-mode", choices=P_MODES, default="T-2",
                     help="dictionary size rule (default: T-2)")
    sim.add_argument("--reps", type=int, default=1000, help="replications (default: 1000)")
    sim.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    sim.add_argument("--design-seed", type=int, default=None,
                     help="separate seed for the fixed design draw")
    sim.add_argument("--estimators", type=lambda s: tuple(t for t in s.split(",") if t),
                     default=None, metavar="A,B,...",
                     help="estimator subset (default: every estimator the study supports)")
    sim.add_argument("--level", type=float, default=0.05, help="nominal test size (default: 0.05)")
    sim.add_argument("--truncation", type=float, default=10_000.0,
                     help="absolute bound applied to estimates before bias/RMSE (default: 10000)")
    sim.add_argument("--workers", type=int, default=None,
                     help="process count (default: CLUSTERLASSO_WORKERS or 1)")
    sim.add_argument("--out", default=None, metavar="PREFIX",
                     help="write PREFIX.json and PREFIX.txt")
    sim.add_argument("--format", choices=("table", "json"), default="table",
                     help="stdout rendering (default: table)")
    sim.set_defaults(func=_cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (RankFailure, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
