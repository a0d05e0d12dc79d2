"""Batch robust PCA by alternating minimization, plus exact small-N oracles.

:func:`fit_batch` minimizes

    ||X - 1 m' - S U'||_F^2 + lambda2 * penalty(O),   U'U = I

by cycling through the mean, scores, subspace (a Procrustes rotation) and
outliers (group or scalar soft-thresholding). :func:`lts_bruteforce` and
:func:`l0_enumeration` solve the trimmed-squares and l0-penalized
problems exactly by enumerating subsets, for verification at small N.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FactorModel,
    OutlierMatrix,
    RegularizerKind,
    SolverOptions,
    as_data_matrix,
    objective_value,
    pca,
    procrustes_rotation,
    residual_matrix,
    svd,
    threshold,
)

ENUMERATION_CAP = 10**6


@dataclass
class BatchFit:
    model: FactorModel
    outliers: OutlierMatrix
    objective_trace: list = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    lambda2: float = 0.0

    @property
    def objective(self):
        return self.objective_trace[-1] if self.objective_trace else float("nan")

    def lowrank(self):
        return self.model.lowrank()


@dataclass
class LtsFit:
    model: FactorModel
    kept_indices: frozenset
    trimmed_cost: float


def _check_rank(q, N, p):
    if not 1 <= q <= min(N, p):
        raise ValueError(f"q={q} must lie in [1, min(N, p)={min(N, p)}]")


def _am_cycle(X, U, O, tau, kind):
    """One mean -> scores -> subspace -> outliers sweep."""
    N = X.shape[0]
    m = (X - O).sum(axis=0) / N
    Xo = X - m - O
    S = Xo @ U
    U = procrustes_rotation(Xo.T @ S)
    O = threshold(X - m - S @ U.T, tau, kind)
    return m, S, U, O


def _run_am(X, U, O, lambda2, kind, opts, tau, objective, callback=None):
    trace = []
    prev = None
    converged = False
    k = 0
    m = S = None
    for k in range(1, opts.max_iters + 1):
        m, S, U, O = _am_cycle(X, U, O, tau, kind)
        obj = objective(m, S, U, O)
        trace.append(obj)
        if callback is not None:
            callback(k, m, S, U, O)
        if prev is not None and abs(prev - obj) <= opts.rel_tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = obj
    return m, S, U, O, trace, k, converged


def fit_batch(X, q, lambda2, kind=RegularizerKind.ROW_L2, opts=None, init=None,
              callback=None):
    """Alternating-minimization robust PCA for a fixed ``lambda2``.

    Parameters
    ----------
    X : (N, p) array
    q : int
        Subspace dimension.
    lambda2 : float
        Outlier-sparsity weight; rows (entries for ``ENTRY_L1``) with
        residual norm at most ``lambda2/2`` get zero outliers.
    kind : RegularizerKind
    opts : SolverOptions
    init : BatchFit, optional
        Warm start: iteration resumes from its subspace and outliers.
        Without it, ``U`` starts at the first ``q`` canonical vectors and
        ``O`` at zero.
    callback : callable, optional
        Called as ``callback(k, m, S, U, O)`` after every cycle.

    Returns
    -------
    BatchFit
    """
    X = as_data_matrix(X)
    N, p = X.shape
    _check_rank(q, N, p)
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    kind = RegularizerKind.parse(kind)
    opts = opts or SolverOptions()
    if init is not None:
        U = init.model.U.copy()
        O = init.outliers.values.copy()
        if U.shape != (p, q) or O.shape != (N, p):
            raise ValueError("warm start does not match the data dimensions")
    else:
        U = np.eye(p)[:, :q]
        O = np.zeros((N, p))

    def objective(m, S, U, O):
        return objective_value(X, FactorModel(m, U, S, orthonormal=False), O,
                               lambda2, kind)

    m, S, U, O, trace, k, converged = _run_am(
        X, U, O, lambda2, kind, opts, lambda2 / 2, objective, callback)
    return BatchFit(FactorModel(m, U, S), OutlierMatrix(O, kind),
                    trace if opts.record_trace else trace[-1:], k, converged,
                    float(lambda2))


def reweighted_objective(X, model, O, lambda0, weights, kind=RegularizerKind.ROW_L2):
    """Weighted-penalty objective used inside one majorization round."""
    R = residual_matrix(X, model, O)
    O = np.asarray(O.values if isinstance(O, OutlierMatrix) else O)
    if RegularizerKind.parse(kind) is RegularizerKind.ENTRY_L1:
        pen = float(np.sum(weights * np.abs(O)))
    else:
        pen = float(np.sum(weights * np.linalg.norm(O, axis=1)))
    return float(np.sum(R * R)) + lambda0 * pen


def reweighting(O, delta, kind=RegularizerKind.ROW_L2):
    """Weights ``1 / (|o| + delta)`` per row (row norms) or per entry."""
    O = np.asarray(O.values if isinstance(O, OutlierMatrix) else O)
    if RegularizerKind.parse(kind) is RegularizerKind.ENTRY_L1:
        return 1.0 / (np.abs(O) + delta)
    return 1.0 / (np.linalg.norm(O, axis=1) + delta)


def refine_reweighted(X, fit, lambda0=None, delta=1e-5, n_rounds=2, inner_iters=1,
                      opts=None):
    """Bias reduction by iteratively reweighted thresholding.

    Each round freezes weights ``w = 1/(|o| + delta)`` from the current
    outliers and runs ``inner_iters`` cycles of the batch solver with
    per-row (per-entry for ``ENTRY_L1``) thresholds ``(lambda0/2) w``.
    ``lambda0`` defaults to ``fit.lambda2 * delta`` so that currently-zero
    outliers keep the threshold of the convex fit.

    The returned ``objective_trace`` holds, for each round, the weighted
    objective at the round's start followed by its value after each inner
    cycle.
    """
    X = as_data_matrix(X)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    kind = fit.outliers.kind
    if lambda0 is None:
        lambda0 = fit.lambda2 * delta
    opts = opts or SolverOptions()
    inner = SolverOptions(max_iters=inner_iters, rel_tol=opts.rel_tol,
                          seed=opts.seed, record_trace=True)
    U = fit.model.U.copy()
    O = fit.outliers.values.copy()
    model = fit.model
    trace = []
    iters = 0
    for _ in range(n_rounds):
        w = reweighting(O, delta, kind)

        def objective(m, S, U, O, w=w):
            return reweighted_objective(X, FactorModel(m, U, S, orthonormal=False),
                                        O, lambda0, w, kind)

        trace.append(objective(model.mean, model.S, model.U, O))
        m, S, U, O, round_trace, k, _ = _run_am(
            X, U, O, lambda0, kind, inner, (lambda0 / 2) * w, objective)
        model = FactorModel(m, U, S)
        trace.extend(round_trace)
        iters += k
    return BatchFit(model, OutlierMatrix(O, kind), trace, iters, True, float(lambda0))


def _subset_pca(X, rows, q):
    """PCA restricted to ``rows``; returns (mean, U, trimmed cost)."""
    sub = X[list(rows)]
    m = sub.mean(axis=0)
    Xc = sub - m
    _, d, Rt = svd(Xc, full_matrices=q > min(Xc.shape))
    U = Rt[:q].T
    cost = float(np.sum(d[q:] ** 2))
    return m, U, cost


def _full_model(X, m, U):
    return FactorModel(m, U, (X - m) @ U)


def lts_bruteforce(X, q, nu, cap=ENUMERATION_CAP):
    """Exact least-trimmed-squares PCA by enumerating all ``nu``-subsets.

    Ties in cost go to the lexicographically smallest index set.
    """
    X = as_data_matrix(X)
    N, p = X.shape
    if not 1 <= nu <= N:
        raise ValueError("coverage nu must lie in [1, N]")
    _check_rank(q, N, p)
    count = math.comb(N, nu)
    if count > cap:
        raise ValueError(f"C({N},{nu}) = {count} subsets exceeds the cap {cap}")
    best = None
    for rows in itertools.combinations(range(N), nu):
        m, U, cost = _subset_pca(X, rows, q)
        if best is None or cost < best[0]:
            best = (cost, rows, m, U)
    cost, rows, m, U = best
    return LtsFit(_full_model(X, m, U), frozenset(rows), cost)


def l0_enumeration(X, q, lambda0, cap=ENUMERATION_CAP):
    """Exact minimizer of the l0-penalized criterion by support enumeration.

    For every candidate outlier support the model is PCA on the remaining
    rows and each flagged row gets ``o_n = r_n`` exactly. Returns the fit
    and the number of flagged rows.
    """
    X = as_data_matrix(X)
    N, p = X.shape
    _check_rank(q, N, p)
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    if 2**N - 1 > cap:
        raise ValueError(f"2^{N} supports exceeds the cap {cap}")
    best = None
    for n_out in range(0, N):
        for rows in itertools.combinations(range(N), N - n_out):
            m, U, cost = _subset_pca(X, rows, q)
            total = cost + lambda0 * n_out
            if best is None or total < best[0]:
                best = (total, rows, m, U)
    total, rows, m, U = best
    model = _full_model(X, m, U)
    R = residual_matrix(X, model)
    O = np.zeros_like(X)
    out = sorted(set(range(N)) - set(rows))
    O[out] = R[out]
    fit = BatchFit(model, OutlierMatrix(O, RegularizerKind.ROW_L2), [total], 0, True,
                   float(lambda0))
    return fit, len(out)


def l0_lambda_interval(X, q, n_outliers, cap=ENUMERATION_CAP):
    """Range of ``lambda0`` for which the l0 solution flags ``n_outliers`` rows.

    With ``C(k)`` the optimal trimmed cost when ``k`` rows are discarded,
    support size ``k`` is optimal iff ``C(k) + k lam <= C(j) + j lam`` for
    all ``j``. Returns ``(lo, hi)``; the interval is empty when ``lo > hi``.
    """
    X = as_data_matrix(X)
    N = X.shape[0]
    costs = [lts_bruteforce(X, q, N - k, cap).trimmed_cost for k in range(N)]
    k = n_outliers
    lo = max([(costs[k] - costs[j]) / (j - k) for j in range(k + 1, N)], default=0.0)
    hi = min([(costs[j] - costs[k]) / (k - j) for j in range(k)], default=math.inf)
    return max(lo, 0.0), hi


def plain_pca_fit(X, q):
    """Non-robust PCA packaged as a :class:`BatchFit` with ``O = 0``."""
    model = pca(X, q)
    R = residual_matrix(X, model)
    return BatchFit(model, OutlierMatrix.zeros(*X.shape), [float(np.sum(R * R))], 0, True)
