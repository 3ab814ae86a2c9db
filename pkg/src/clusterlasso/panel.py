"""Panel containers and cluster-aware transformations.

Data is long format: one row per (cluster, time) pair.  All estimation in
this package runs on the within-transformed panel, i.e. every variable has
its within-cluster mean removed, which wipes out additive cluster-level
effects.  The transformed container keeps the cluster layout around so that
downstream code can form within-cluster sums (score sums, sandwich meats)
without re-deriving group boundaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# A demeaned column whose sum of squares falls below this multiple of the
# row count carries no within-cluster variation worth selecting on.
ZERO_VARIANCE_TOL = 1e-12

# Per-cluster sums of a demeaned column must vanish to this relative level.
DEMEAN_TOL = 1e-10


class SchemaError(ValueError):
    """Malformed input data: bad shapes, missing columns, ragged CSV rows."""


def _describe_columns(names: Sequence[str], limit: int = 10) -> str:
    shown = ", ".join(names[:limit])
    extra = len(names) - limit
    return f"{shown}, ... ({extra} more)" if extra > 0 else shown


def _as_float_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise SchemaError(f"X must be 2-dimensional, got ndim={X.ndim}")
    return X


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        row = int(idx[0])
        if arr.ndim == 2:
            raise SchemaError(f"non-finite value in {name} at row {row}, column {int(idx[1])}")
        raise SchemaError(f"non-finite value in {name} at row {row}")


@dataclass
class PanelData:
    """Long-format panel: one row per (cluster, time) observation.

    Parameters
    ----------
    cluster_index : array of int, shape (N,)
        Cluster (e.g. individual or state) id of each row.
    time_index : array of int, shape (N,)
        Time id of each row.  (cluster, time) pairs must be unique; panels
        may be unbalanced.
    X : array, shape (N, p)
        Covariate columns, addressed by ``column_names``.
    column_names : sequence of str
        One name per column of X.
    y : array, shape (N,), optional
        Outcome, when it is carried separately from X.  Estimation
        entry points can also pull the outcome out of X by name.
    weights : array, shape (N,), optional
        Positive per-cluster weight, repeated on every row of the cluster.
    """

    cluster_index: np.ndarray
    time_index: np.ndarray
    X: np.ndarray
    column_names: tuple[str, ...]
    y: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.cluster_index = np.asarray(self.cluster_index)
        self.time_index = np.asarray(self.time_index)
        self.X = _as_float_matrix(self.X)
        self.column_names = tuple(str(c) for c in self.column_names)
        N = self.X.shape[0]
        if self.cluster_index.shape != (N,) or self.time_index.shape != (N,):
            raise SchemaError(
                f"cluster/time index length must match X rows ({N}), got "
                f"{self.cluster_index.shape[0]} and {self.time_index.shape[0]}"
            )
        if len(self.column_names) != self.X.shape[1]:
            raise SchemaError(
                f"{len(self.column_names)} column names for {self.X.shape[1]} columns"
            )
        if len(set(self.column_names)) != len(self.column_names):
            dupes = sorted({c for c in self.column_names if self.column_names.count(c) > 1})
            raise SchemaError(f"duplicate column names: {dupes}")
        _check_finite("X", self.X)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            if self.y.shape != (N,):
                raise SchemaError(f"y length {self.y.shape[0]} does not match X rows {N}")
            _check_finite("y", self.y)
        # unique (cluster, time) keys
        keys = np.stack([self.cluster_index, self.time_index], axis=1)
        uniq, counts = np.unique(keys, axis=0, return_counts=True)
        if (counts > 1).any():
            c, t = uniq[np.argmax(counts > 1)]
            raise SchemaError(f"duplicate (cluster, time) pair: ({c}, {t})")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape != (N,):
                raise SchemaError(f"weights length {self.weights.shape[0]} does not match rows {N}")
            _check_finite("weights", self.weights)
            if (self.weights <= 0).any():
                row = int(np.argmax(self.weights <= 0))
                raise SchemaError(f"non-positive weight at row {row}")
            for cid in np.unique(self.cluster_index):
                w = self.weights[self.cluster_index == cid]
                if not np.all(w == w[0]):
                    raise SchemaError(f"weights vary within cluster {cid}")

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.column_names.index(name)
        except ValueError:
            raise SchemaError(
                f"no column named {name!r}; available: {_describe_columns(self.column_names)}"
            ) from None
        return self.X[:, j]


@dataclass
class DemeanedPanel:
    """Within-transformed panel, rows sorted by (cluster, time).

    ``X`` and (when present) ``y`` hold deviations from within-cluster
    means.  ``cluster_starts`` gives the row offset of each cluster block
    plus a final sentinel equal to N, so cluster i occupies rows
    ``cluster_starts[i]:cluster_starts[i + 1]``.
    """

    y: np.ndarray | None
    X: np.ndarray
    cluster_codes: np.ndarray
    time_index: np.ndarray
    cluster_starts: np.ndarray
    cluster_ids: np.ndarray
    column_names: tuple[str, ...]
    weights: np.ndarray | None = None
    weighted: bool = False
    singleton_clusters: tuple[int, ...] = ()
    zero_variance_columns: tuple[int, ...] = ()

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_starts) - 1

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(self.cluster_starts)

    @property
    def all_singletons(self) -> bool:
        """True when every cluster has a single row: the transform is degenerate."""
        return bool(np.all(self.cluster_sizes == 1))

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.column_names.index(name)
        except ValueError:
            raise SchemaError(
                f"no column named {name!r}; available: {_describe_columns(self.column_names)}"
            ) from None
        return self.X[:, j]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names]) if names else np.empty((self.n_obs, 0))


def demean_by_groups(M: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Subtract within-group means from rows of ``M`` (1- or 2-d), groups contiguous."""
    M = np.asarray(M, dtype=np.float64)
    sizes = np.diff(starts)
    sums = np.add.reduceat(M, starts[:-1], axis=0)
    means = sums / (sizes if M.ndim == 1 else sizes[:, None])
    return M - np.repeat(means, sizes, axis=0)


def group_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Within-group sums over contiguous groups; works on (N,) or (N, p) arrays."""
    return np.add.reduceat(np.asarray(values, dtype=np.float64), starts[:-1], axis=0)


def within_demean(panel: PanelData) -> DemeanedPanel:
    """Remove within-cluster means from every variable of ``panel``.

    Rows come back sorted by (cluster, time).  Clusters with a single
    observation demean to all-zero rows and are flagged; columns left with
    essentially no variation (sum of squares below ``ZERO_VARIANCE_TOL * N``)
    are flagged so selection code can skip them.
    """
    order = np.lexsort((panel.time_index, panel.cluster_index))
    cluster_sorted = panel.cluster_index[order]
    ids, codes = np.unique(cluster_sorted, return_inverse=True)
    counts = np.bincount(codes)
    starts = np.concatenate([[0], np.cumsum(counts)])

    X = demean_by_groups(panel.X[order], starts)
    y = demean_by_groups(panel.y[order], starts) if panel.y is not None else None

    N = X.shape[0]
    ss = np.einsum("ij,ij->j", X, X)
    zero_var = tuple(int(j) for j in np.flatnonzero(ss < ZERO_VARIANCE_TOL * N))
    singles = tuple(int(c) for c in np.flatnonzero(counts == 1))

    # per-cluster weight vector (constant within cluster by PanelData contract)
    weights = None
    if panel.weights is not None:
        weights = panel.weights[order][starts[:-1]].copy()

    out = DemeanedPanel(
        y=y,
        X=X,
        cluster_codes=codes,
        time_index=panel.time_index[order],
        cluster_starts=starts,
        cluster_ids=ids,
        column_names=panel.column_names,
        weights=weights,
        singleton_clusters=singles,
        zero_variance_columns=zero_var,
    )
    _verify_demeaned(out)
    return out


def _verify_demeaned(dm: DemeanedPanel) -> None:
    """Check that within-cluster sums vanish relative to column scale."""
    scale = np.maximum(np.sqrt(np.mean(dm.X * dm.X, axis=0)), 1.0)
    resid = np.abs(group_sums(dm.X, dm.cluster_starts)).max(axis=0)
    worst = (resid / (scale * dm.cluster_sizes.max())).max() if dm.X.size else 0.0
    if worst > DEMEAN_TOL:
        raise AssertionError(f"within-cluster sums did not vanish (relative residual {worst:.3e})")
    if dm.y is not None and dm.y.size:
        yscale = max(float(np.sqrt(np.mean(dm.y * dm.y))), 1.0)
        yresid = np.abs(group_sums(dm.y, dm.cluster_starts)).max()
        if yresid / (yscale * dm.cluster_sizes.max()) > DEMEAN_TOL:
            raise AssertionError("within-cluster sums of y did not vanish")


def apply_cluster_weights(dm: DemeanedPanel) -> DemeanedPanel:
    """Scale each cluster's rows by sqrt(w_i); a flag guards double application.

    Weighted least squares on the scaled data equals weighted estimation on
    the original data, so everything downstream can stay weight-oblivious.
    """
    if dm.weighted:
        raise ValueError("cluster weights already applied to this panel")
    if dm.weights is None:
        return dm
    root = np.sqrt(np.repeat(dm.weights, dm.cluster_sizes))
    return DemeanedPanel(
        y=None if dm.y is None else dm.y * root,
        X=dm.X * root[:, None],
        cluster_codes=dm.cluster_codes,
        time_index=dm.time_index,
        cluster_starts=dm.cluster_starts,
        cluster_ids=dm.cluster_ids,
        column_names=dm.column_names,
        weights=dm.weights,
        weighted=True,
        singleton_clusters=dm.singleton_clusters,
        zero_variance_columns=dm.zero_variance_columns,
    )


def clustered_meat(a: np.ndarray, b: np.ndarray, starts: np.ndarray) -> float:
    """(1/N) sum_i (sum_{t in i} a_it)(sum_{t in i} b_it).

    The workhorse of every cluster-robust variance in the package.  With
    singleton clusters it collapses exactly to the heteroscedasticity-robust
    (White) meat (1/N) sum a_r b_r.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"series must be 1-d and equal length, got {a.shape} and {b.shape}")
    if a.shape[0] != starts[-1]:
        raise ValueError(f"series length {a.shape[0]} does not match panel rows {starts[-1]}")
    sa = group_sums(a, starts)
    sb = group_sums(b, starts)
    return float(sa @ sb) / a.shape[0]


def meat_for_panel(a: np.ndarray, b: np.ndarray, dm: DemeanedPanel) -> float:
    return clustered_meat(a, b, dm.cluster_starts)


def _parse_int(value: str, what: str, row: int) -> int:
    try:
        f = float(value)
    except ValueError:
        raise SchemaError(f"{what} value {value!r} at data row {row} is not numeric") from None
    if not float(f).is_integer():
        raise SchemaError(f"{what} value {value!r} at data row {row} is not an integer id")
    return int(f)


def load_csv(
    path: str,
    cluster_col: str = "cluster",
    time_col: str = "time",
    weight_col: str | None = None,
) -> PanelData:
    """Read a long-format CSV into a :class:`PanelData`.

    The file must have a header containing ``cluster_col`` and ``time_col``;
    every remaining column is read as a float64 covariate.  Rows whose field
    count differs from the header are rejected with their row number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for required in (cluster_col, time_col):
            if required not in header:
                raise SchemaError(f"{path}: missing required column {required!r}")
        if weight_col is not None and weight_col not in header:
            raise SchemaError(f"{path}: missing weight column {weight_col!r}")
        ci = header.index(cluster_col)
        ti = header.index(time_col)
        wi = header.index(weight_col) if weight_col is not None else None
        value_cols = [
            (j, name)
            for j, name in enumerate(header)
            if j not in (ci, ti) and (wi is None or j != wi)
        ]

        clusters: list[int] = []
        times: list[int] = []
        weights: list[float] = []
        data: list[list[float]] = []
        for row_num, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # ignore blank lines
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: row {row_num} has {len(row)} fields, header has {len(header)}"
                )
            clusters.append(_parse_int(row[ci], cluster_col, row_num))
            times.append(_parse_int(row[ti], time_col, row_num))
            if wi is not None:
                try:
                    weights.append(float(row[wi]))
                except ValueError:
                    raise SchemaError(
                        f"{path}: weight value {row[wi]!r} at data row {row_num} is not numeric"
                    ) from None
            vals = []
            for j, name in value_cols:
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise SchemaError(
                        f"{path}: column {name!r} at data row {row_num}: "
                        f"{row[j]!r} is not numeric"
                    ) from None
            data.append(vals)

    if not data:
        raise SchemaError(f"{path}: no data rows")
    return PanelData(
        cluster_index=np.array(clusters, dtype=np.int64),
        time_index=np.array(times, dtype=np.int64),
        X=np.array(data, dtype=np.float64),
        column_names=tuple(name for _, name in value_cols),
        weights=np.array(weights) if weights else None,
    )
