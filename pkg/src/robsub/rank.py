"""Rank-controlled robust PCA through Frobenius-regularized factors.

:func:`fit_rank` minimizes

    ||X - 1 m' - S U'||_F^2 + (lam_star/2)(||U||_F^2 + ||S||_F^2) + lambda2 * penalty(O)

by alternating ridge updates of ``U`` and ``S`` with outlier thresholding.
When its residual has spectral norm at most ``lam_star/2``, the factored
solution also solves the convex nuclear-norm program

    min_{L,O} ||X - L - O||_F^2 + lam_star ||L||_* + lambda2 * penalty(O),

which :func:`spcp_reference` solves directly for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    OutlierMatrix,
    RegularizerKind,
    SolverOptions,
    as_data_matrix,
    penalty,
    threshold,
)
from .datagen import rng_from_seed

CERTIFICATE_RTOL = 1e-6


@dataclass
class RankFit:
    mean: np.ndarray
    U: np.ndarray
    S: np.ndarray
    outliers: OutlierMatrix
    objective_trace: list = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    lam_star: float = 0.0
    lambda2: float = 0.0

    @property
    def objective(self):
        return self.objective_trace[-1]

    def lowrank(self):
        """``S U'`` without the mean."""
        return self.S @ self.U.T

    def residual(self, X):
        return X - self.mean - self.S @ self.U.T - self.outliers.values


@dataclass
class SpcpSolution:
    L: np.ndarray
    O: np.ndarray
    objective: float
    dual_residual: float
    iters: int
    converged: bool


def noise_presets(N, sigma2):
    """Default ``(lam_star, lambda2)`` from the nominal noise variance."""
    return 2.0 * np.sqrt(2.0 * N * sigma2), 2.0 * np.sqrt(2.0 * sigma2)


def init_scores(N, qbar, seed):
    """Random initial scores: standard normal scaled by ``1/sqrt(qbar)``."""
    return rng_from_seed(seed).standard_normal((N, qbar)) / np.sqrt(qbar)


def rank_objective(X, mean, U, S, O, lam_star, lambda2, kind=RegularizerKind.ROW_L2):
    R = X - mean - S @ U.T - O
    return (float(np.sum(R * R)) + 0.5 * lam_star * (float(np.sum(U * U)) + float(np.sum(S * S)))
            + lambda2 * penalty(O, kind))


def _ridge(A, B, lam_star):
    """``A B (B'B + (lam_star/2) I)^{-1}``, solved via the normal equations."""
    G = B.T @ B + 0.5 * lam_star * np.eye(B.shape[1])
    try:
        return np.linalg.solve(G, (A @ B).T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular ridge system: lam_star = 0 with rank-deficient factors") from exc


def fit_rank(X, qbar, lam_star, lambda2, kind=RegularizerKind.ROW_L2, opts=None,
             fit_mean=True, S0=None, callback=None):
    """Alternating ridge / thresholding solver with an upper bound ``qbar`` on rank.

    ``lambda2 = inf`` pins the outliers to zero. With ``fit_mean=False`` the
    mean is held at zero, matching the convex program exactly. ``S0``
    overrides the seeded random initial scores. ``callback(k, m, U, S, O)``
    runs after every cycle.
    """
    X = as_data_matrix(X)
    N, p = X.shape
    if not 1 <= qbar <= min(N, p):
        raise ValueError(f"qbar={qbar} must lie in [1, min(N, p)={min(N, p)}]")
    if lam_star < 0 or lambda2 < 0:
        raise ValueError("regularization weights must be nonnegative")
    kind = RegularizerKind.parse(kind)
    opts = opts or SolverOptions()
    S = init_scores(N, qbar, opts.seed) if S0 is None else np.array(S0, dtype=float)
    O = np.zeros_like(X)
    m = np.zeros(p)
    pen = 0.0 if np.isinf(lambda2) else lambda2
    trace = []
    prev = None
    converged = False
    k = 0
    for k in range(1, opts.max_iters + 1):
        if fit_mean:
            m = (X - O).sum(axis=0) / N
        Xo = X - m - O
        U = _ridge(Xo.T, S, lam_star)
        S = _ridge(Xo, U, lam_star)
        if not np.isinf(lambda2):
            O = threshold(X - m - S @ U.T, lambda2 / 2, kind)
        obj = rank_objective(X, m, U, S, O, lam_star, pen, kind)
        trace.append(obj)
        if callback is not None:
            callback(k, m, U, S, O)
        if prev is not None and abs(prev - obj) <= opts.rel_tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = obj
    return RankFit(m, U, S, OutlierMatrix(O, kind), trace if opts.record_trace else trace[-1:],
                   k, converged, float(lam_star), float(lambda2))


def singular_value_threshold(A, tau):
    """Prox of ``tau ||.||_*``: shrink singular values by ``tau``."""
    L, d, Rt = np.linalg.svd(A, full_matrices=False)
    d = np.maximum(d - tau, 0.0)
    k = int(np.count_nonzero(d))
    return (L[:, :k] * d[:k]) @ Rt[:k]


def nuclear_norm(A):
    return float(np.linalg.svd(A, compute_uv=False).sum())


def spcp_objective(X, L, O, lam_star, lambda2, kind=RegularizerKind.ROW_L2):
    R = X - L - O
    return float(np.sum(R * R)) + lam_star * nuclear_norm(L) + lambda2 * penalty(O, kind)


def spcp_reference(X, lam_star, lambda2, kind=RegularizerKind.ROW_L2, opts=None,
                   center=False, tol=1e-8):
    """Convex low-rank-plus-outliers program by accelerated proximal gradient.

    Minimizing out ``O`` in closed form leaves a Huber-type smooth loss in
    ``L`` with gradient Lipschitz constant 2, so a proximal step of length
    1/2 is ``L <- SVT(X - O*(L), lam_star/2)``. FISTA momentum with
    function-value restarts accelerates it. ``dual_residual`` is the
    relative fixed-point residual ``||T(L) - L||_F / max(1, ||L||_F)`` at
    the returned point; convergence means it fell below ``tol``.

    The program has no mean term; ``center`` subtracts column means of ``X``
    up front as an oracle-only convenience.
    """
    X = as_data_matrix(X)
    if lam_star <= 0 or lambda2 <= 0:
        raise ValueError("spcp_reference needs positive regularization weights")
    kind = RegularizerKind.parse(kind)
    opts = opts or SolverOptions(max_iters=20000)
    if center:
        X = X - X.mean(axis=0)

    def inner(L):
        return threshold(X - L, lambda2 / 2, kind)

    def step(L):
        return singular_value_threshold(X - inner(L), lam_star / 2)

    def F(L):
        return spcp_objective(X, L, inner(L), lam_star, lambda2, kind)

    L = np.zeros_like(X)
    Y = L
    t = 1.0
    f_prev = F(L)
    res = np.inf
    converged = False
    k = 0
    for k in range(1, opts.max_iters + 1):
        L_new = step(Y)
        f_new = F(L_new)
        if f_new > f_prev:
            # restart momentum from the last accepted point
            Y, t = L, 1.0
            L_new = step(L)
            f_new = F(L_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = L_new + ((t - 1.0) / t_new) * (L_new - L)
        L, t, f_prev = L_new, t_new, f_new
        res = np.linalg.norm(step(L) - L) / max(1.0, np.linalg.norm(L))
        if res <= tol:
            converged = True
            break
    O = inner(L)
    return SpcpSolution(L, O, spcp_objective(X, L, O, lam_star, lambda2, kind),
                        float(res), k, converged)


def spectral_norm(A, tol=1e-10, max_iters=1000, seed=0):
    """Largest singular value by power iteration on ``A'A``."""
    A = np.asarray(A, dtype=float)
    if not np.any(A):
        return 0.0
    v = rng_from_seed(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(nw))
        if abs(new - sigma) <= tol * max(new, 1e-300):
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(A @ v))


def check_certificate(X, fit, lam_star, rtol=CERTIFICATE_RTOL):
    """Global-optimality certificate for a stationary factored solution.

    Returns ``(holds, gap)`` with ``gap = lam_star/2 - ||X - 1m' - SU' - O||_2``.
    At an optimum with ``SU' != 0`` the leading residual singular values
    equal ``lam_star/2`` exactly, so the gap is zero up to solver precision;
    the certificate holds when ``gap >= -rtol * lam_star/2``.
    """
    X = as_data_matrix(X)
    gap = lam_star / 2 - spectral_norm(fit.residual(X))
    return bool(gap >= -rtol * lam_star / 2), float(gap)


def balanced_factors(L):
    """SVD-balanced factors ``(U*, S*)`` with ``L = S* U*'``."""
    Ul, d, Vt = np.linalg.svd(np.asarray(L, dtype=float), full_matrices=False)
    root = np.sqrt(d)
    return Vt.T * root, Ul * root


def nuclear_variational_gap(L):
    """``(||U*||_F^2 + ||S*||_F^2)/2 - ||L||_*`` at the balanced factors (~0)."""
    L = np.asarray(L, dtype=float)
    U, S = balanced_factors(L)
    return 0.5 * (float(np.sum(U * U)) + float(np.sum(S * S))) - nuclear_norm(L)
