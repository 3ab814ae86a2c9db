"""Small, deliberately naive reference implementations used to check the fast paths.

Everything here trades speed for obviousness: explicit Python loops, exhaustive
enumeration, textbook formulas.  Production code must agree with these on small
problems; nothing in this module is shared with the estimation code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

SPARSE_EIG_MAX_DIM = 20


@dataclass(frozen=True)
class SparseEigenRequest:
    """Ask for restricted eigenvalue extremes of a symmetric matrix.

    ``m`` is the support size: extremes are taken over unit vectors with at
    most ``m`` nonzero coordinates.
    """

    matrix: np.ndarray
    m: int

    def __post_init__(self) -> None:
        M = np.asarray(self.matrix, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError(f"matrix must be square, got shape {M.shape}")
        if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
            raise ValueError("matrix must be symmetric")
        if M.shape[0] > SPARSE_EIG_MAX_DIM:
            raise ValueError(
                f"subset enumeration is exponential; dimension {M.shape[0]} exceeds "
                f"the supported maximum of {SPARSE_EIG_MAX_DIM}"
            )
        if not 1 <= self.m <= M.shape[0]:
            raise ValueError(f"m must be in 1..{M.shape[0]}, got {self.m}")
        object.__setattr__(self, "matrix", M)


def sparse_eigenvalues(request: SparseEigenRequest) -> tuple[float, float]:
    """Exact (min, max) m-sparse eigenvalues by enumerating all size-m supports.

    For each support S, the extremes of delta' M delta over unit vectors
    supported on S are the eigenvalue extremes of the |S| x |S| principal
    submatrix; sparse extremes are the extremes over all supports.  Vectors
    with fewer than m nonzeros live in some size-m support, so enumerating
    supports of size exactly m covers them.
    """
    M = request.matrix
    p = M.shape[0]
    lo = np.inf
    hi = -np.inf
    for support in combinations(range(p), request.m):
        idx = np.array(support)
        vals = np.linalg.eigvalsh(M[np.ix_(idx, idx)])
        lo = min(lo, float(vals[0]))
        hi = max(hi, float(vals[-1]))
    return lo, hi


def reference_ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS through explicitly inverted normal equations: (X'X)^-1 X'y.

    Requires full column rank; this is the point — the production solver must
    agree with the textbook formula wherever the formula is defined.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    XtX = X.T @ X
    if np.linalg.matrix_rank(XtX) < X.shape[1]:
        raise ValueError("reference_ols requires full column rank")
    return np.linalg.inv(XtX) @ (X.T @ y)


def soft_threshold_oracle(z: float, threshold: float) -> float:
    """sign(z) * max(|z| - threshold, 0), written out longhand."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if z > threshold:
        return z - threshold
    if z < -threshold:
        return z + threshold
    return 0.0


def brute_force_cluster_meat(a, b, cluster_of_row) -> float:
    """Double-loop version of the cluster meat for cross-checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cluster_of_row = np.asarray(cluster_of_row)
    total = 0.0
    for cid in np.unique(cluster_of_row):
        rows = np.flatnonzero(cluster_of_row == cid)
        sa = sum(float(a[r]) for r in rows)
        sb = sum(float(b[r]) for r in rows)
        total += sa * sb
    return total / len(a)


def brute_force_loadings(X, resid, cluster_of_row) -> np.ndarray:
    """Double-loop per-column loading: sqrt((1/N) sum_i (sum_{t in i} x_itj e_it)^2)."""
    X = np.asarray(X, dtype=np.float64)
    resid = np.asarray(resid, dtype=np.float64)
    cluster_of_row = np.asarray(cluster_of_row)
    N, p = X.shape
    out = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for cid in np.unique(cluster_of_row):
            rows = np.flatnonzero(cluster_of_row == cid)
            s = sum(float(X[r, j]) * float(resid[r]) for r in rows)
            acc += s * s
        out[j] = np.sqrt(acc / N)
    return out
