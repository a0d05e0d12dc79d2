"""Robustification paths over a lambda2 grid and data-driven selection.

A path is a sequence of batch fits over decreasing ``lambda2`` values, each
warm-started from its predecessor. Two selectors pick a grid point: by a
known outlier count, or by matching whitened residual variance to the
known nominal noise covariance.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .batch import BatchFit, fit_batch
from .core import RegularizerKind, SolverOptions, as_data_matrix, pca, residual_matrix

ZERO_NORM = 1e-12


@dataclass
class PathResult:
    grid: np.ndarray
    fits: list
    outlier_norms: np.ndarray
    support_counts: np.ndarray
    kind: RegularizerKind = RegularizerKind.ROW_L2

    def __len__(self):
        return len(self.grid)

    @property
    def objectives(self):
        return np.array([f.objective for f in self.fits])

    def to_csv(self):
        """Delimited table: lambda2, support count, objective, per-row norms."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        N = self.outlier_norms.shape[0]
        w.writerow(["lambda2", "l0", "objective"] + [f"o{n}" for n in range(N)])
        for g, lam in enumerate(self.grid):
            w.writerow([repr(float(lam)), int(self.support_counts[g]),
                        repr(float(self.fits[g].objective))]
                       + [repr(float(v)) for v in self.outlier_norms[:, g]])
        return buf.getvalue()


@dataclass
class Selection:
    index: int
    lambda2: float
    fit: BatchFit
    approximate: bool = False
    criterion: np.ndarray | None = None


def lambda_grid(lambda_max, eps=1e-4, G=100):
    """``G`` log-spaced values from ``lambda_max`` down to ``eps * lambda_max``."""
    if not lambda_max > 0:
        raise ValueError("lambda_max must be positive")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if G < 2:
        raise ValueError("grid needs at least two points")
    grid = np.geomspace(lambda_max, eps * lambda_max, G)
    grid[0], grid[-1] = lambda_max, eps * lambda_max
    return grid


def estimate_lambda_max(X, q):
    """Twice the largest plain-PCA residual row norm.

    Plain PCA with ``O = 0`` is a fixed point of the batch cycle at any
    ``lambda2`` at or above this value. At exactly this value the largest
    residual row sits on the threshold, so solvers approaching PCA from
    elsewhere can leave a vanishing outlier on it.
    """
    X = as_data_matrix(X)
    R = residual_matrix(X, pca(X, q))
    return 2.0 * float(np.linalg.norm(R, axis=1).max())


def _support_count(O, kind):
    if kind is RegularizerKind.ENTRY_L1:
        return int(np.count_nonzero(np.abs(O) >= ZERO_NORM))
    return int(np.count_nonzero(np.linalg.norm(O, axis=1) >= ZERO_NORM))


def compute_path(X, q, grid, kind=RegularizerKind.ROW_L2, opts=None, warm_start=True):
    """Batch fits along a strictly decreasing ``grid``.

    ``fits[0]`` is cold-started; with ``warm_start`` each later fit starts
    from its predecessor. Rows with outlier norm below 1e-12 count as zero.
    """
    X = as_data_matrix(X)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) >= 0):
        raise ValueError("grid must be strictly decreasing")
    kind = RegularizerKind.parse(kind)
    opts = opts or SolverOptions()
    fits = []
    prev = None
    for lam in grid:
        fit = fit_batch(X, q, lam, kind, opts, init=prev if warm_start else None)
        fits.append(fit)
        prev = fit
    norms = np.column_stack([f.outliers.row_norms for f in fits])
    counts = np.array([_support_count(f.outliers.values, kind) for f in fits])
    return PathResult(grid, fits, norms, counts, kind)


def select_by_count(path, n_outliers):
    """Largest ``lambda2`` whose support count equals ``n_outliers``.

    Falls back to the largest ``lambda2`` with count >= ``n_outliers``,
    flagged ``approximate``.
    """
    counts = np.asarray(path.support_counts)
    exact = np.flatnonzero(counts == n_outliers)
    if exact.size:
        g = int(exact[0])
        return Selection(g, float(path.grid[g]), path.fits[g], False)
    over = np.flatnonzero(counts >= n_outliers)
    if not over.size:
        raise ValueError(f"no grid point reaches {n_outliers} outliers "
                         f"(max {int(counts.max())})")
    g = int(over[0])
    return Selection(g, float(path.grid[g]), path.fits[g], True)


def inverse_sqrt_psd(Sigma, rel_clip=1e-12):
    """Symmetric ``Sigma^{-1/2}``; returns ``(W, n_clipped)``."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("noise covariance must be square")
    if not np.allclose(Sigma, Sigma.T, atol=1e-12 * max(1.0, np.abs(Sigma).max())):
        raise ValueError("noise covariance must be symmetric")
    w, V = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    if w.max() <= 0:
        raise ValueError("noise covariance must be positive definite")
    floor = rel_clip * w.max()
    clipped = int(np.count_nonzero(w < floor))
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T, clipped


def residual_dof_factor(N, p, q):
    """Expected fraction of noise variance left in rank-``q`` PCA residuals.

    A centered rank-``q`` fit absorbs about ``(N - 1)p - (N - 1 - q)(p - q)``
    degrees of freedom, so residual variance underestimates the noise by
    ``(N - q - 1)(p - q) / ((N - 1) p)``.
    """
    if N - q - 1 <= 0 or p - q <= 0:
        return 1.0
    return (N - q - 1) * (p - q) / ((N - 1) * p)


def variance_deviation(X, fit, W, kind=RegularizerKind.ROW_L2, dof_correct=True):
    """``|tr(cov of whitened inlier residuals) - p|`` for one fit, or None.

    For row outliers the inliers are rows with ``o_n = 0`` and at least
    ``p + 1`` are required. For entry outliers the whitening must be
    diagonal; each column's variance is taken over its unflagged entries
    (at least two per column). With ``dof_correct`` the trace is divided by
    :func:`residual_dof_factor`.
    """
    N, p = X.shape
    R = residual_matrix(X, fit.model)
    O = fit.outliers.values
    scale = residual_dof_factor(N, p, fit.model.q) if dof_correct else 1.0
    if kind is RegularizerKind.ENTRY_L1:
        if np.any(np.abs(W - np.diag(np.diag(W))) > 0):
            raise ValueError("entry-wise selection needs a diagonal noise covariance")
        Z = R * np.diag(W)[None, :]
        keep = np.abs(O) < ZERO_NORM
        n_keep = keep.sum(axis=0)
        if np.any(n_keep < 2):
            return None
        mean = np.where(keep, Z, 0.0).sum(axis=0) / n_keep
        var = (np.where(keep, Z - mean, 0.0) ** 2).sum(axis=0) / (n_keep - 1)
        return abs(float(var.sum()) / scale - p)
    inliers = np.linalg.norm(O, axis=1) < ZERO_NORM
    if inliers.sum() < p + 1:
        return None
    Z = R[inliers] @ W
    cov = np.cov(Z, rowvar=False)
    return abs(float(np.trace(np.atleast_2d(cov))) / scale - p)


def select_by_noise_cov(path, X, Sigma, dof_correct=True):
    """Grid point minimizing ``|tr(Sigma_r) - p|`` over whitened inlier residuals.

    Grid points leaving too few inliers are skipped; ties go to the larger
    ``lambda2``.
    """
    X = as_data_matrix(X)
    W, clipped = inverse_sqrt_psd(Sigma)
    if clipped:
        warnings.warn(f"clipped {clipped} small eigenvalue(s) of the noise covariance")
    crit = np.full(len(path.grid), np.nan)
    for g, fit in enumerate(path.fits):
        val = variance_deviation(X, fit, W, path.kind, dof_correct)
        if val is not None:
            crit[g] = val
    if np.all(np.isnan(crit)):
        raise ValueError("every grid point leaves too few inlier residuals")
    g = int(np.nanargmin(crit))
    return Selection(g, float(path.grid[g]), path.fits[g], False, crit)
