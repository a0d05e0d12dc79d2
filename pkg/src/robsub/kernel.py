"""Robust kernel PCA through coefficient matrices against a Gram matrix.

With feature map ``phi`` and ``Phi = [phi(x_1), ..., phi(x_N)]`` the model
keeps ``m = Phi mu``, ``U = Phi Upsilon`` and ``O' = Phi Omega``, so every
update of the rank-controlled solver only needs ``K = Phi' Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SolverOptions, as_data_matrix
from .rank import init_scores

PSD_TOL = 1e-8
NEG_RHO_TOL = 1e-10


@dataclass
class GramMatrix:
    K: np.ndarray
    psd_shift: float = 0.0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.K.ndim != 2 or self.K.shape[0] != self.K.shape[1]:
            raise ValueError("Gram matrix must be square")
        if np.abs(self.K - self.K.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(self.K).max(initial=0.0)):
            raise ValueError("Gram matrix must be symmetric")
        self.K = 0.5 * (self.K + self.K.T)

    @property
    def N(self):
        return self.K.shape[0]

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.K)[0])


def linear_gram(X):
    X = as_data_matrix(X)
    return GramMatrix(X @ X.T)


def rbf_gram(X, c):
    """Gaussian kernel ``exp(-||x_i - x_j||^2 / c)``."""
    if not c > 0:
        raise ValueError("kernel width c must be positive")
    X = as_data_matrix(X)
    sq = np.sum(X * X, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(D, 0.0)
    return GramMatrix(np.exp(-D / c))


def normalized_adjacency(A):
    """``D^{-1/2} A D^{-1/2}``; isolated nodes get zero rows."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.allclose(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(A < 0):
        raise ValueError("adjacency must be nonnegative")
    if np.any(np.diag(A) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    deg = A.sum(axis=1)
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return inv[:, None] * A * inv[None, :]


def graph_gram(A, zeta=None):
    """``zeta I + D^{-1/2} A D^{-1/2}``.

    Without ``zeta`` the shift is ``max(0, -lambda_min) + 1e-8``, the
    smallest one making ``K`` positive semidefinite with a margin.
    """
    An = normalized_adjacency(A)
    if zeta is None:
        lam_min = float(np.linalg.eigvalsh(An)[0]) if An.size else 0.0
        zeta = max(0.0, -lam_min) + PSD_TOL
    return GramMatrix(zeta * np.eye(An.shape[0]) + An, float(zeta))


@dataclass
class KernelModel:
    mu: np.ndarray
    Upsilon: np.ndarray
    S: np.ndarray
    Omega: np.ndarray
    lam_star: float
    lambda2: float
    objective_trace: list = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    shrink: np.ndarray | None = None
    residual_norms: np.ndarray | None = None

    @property
    def objective(self):
        return self.objective_trace[-1]


def _kmat(K):
    return K.K if isinstance(K, GramMatrix) else np.asarray(K, dtype=float)


def _quad_diag(M, K):
    """``diag(M' K M)``."""
    return np.einsum("ij,ij->j", M, K @ M)


def kernel_objective(K, mu, Upsilon, S, Omega, lam_star, lambda2):
    """Robust KPCA cost evaluated through ``K`` only."""
    K = _kmat(K)
    N = K.shape[0]
    M = np.eye(N) - np.outer(mu, np.ones(N)) - Upsilon @ S.T - Omega
    fit = float(np.sum(_quad_diag(M, K)))
    ridge = float(np.sum(_quad_diag(Upsilon, K))) + float(np.sum(S * S))
    norms = np.sqrt(np.maximum(_quad_diag(Omega, K), 0.0))
    return fit + 0.5 * lam_star * ridge + lambda2 * float(norms.sum())


def _ridge_solve(A, G, lam_star):
    G = G + 0.5 * lam_star * np.eye(G.shape[0])
    try:
        return np.linalg.solve(G, A.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular ridge system: lam_star = 0 with rank-deficient factors") from exc


def fit_kpca(K, qbar, lam_star, lambda2, opts=None, S0=None, callback=None):
    """Robust kernel PCA by cycling ``mu -> Upsilon -> S -> Omega``.

    ``S0`` overrides the seeded random initial scores (the same draw as
    :func:`robsub.rank.fit_rank` for a given seed). ``callback(k, mu,
    Upsilon, S, Omega)`` runs after every cycle. Convergence is judged on
    the relative change of the kernel-expressed objective.
    """
    K = _kmat(K)
    N = K.shape[0]
    if qbar < 1:
        raise ValueError("qbar must be >= 1")
    if lam_star < 0 or lambda2 < 0:
        raise ValueError("regularization weights must be nonnegative")
    opts = opts or SolverOptions()
    S = init_scores(N, qbar, opts.seed) if S0 is None else np.array(S0, dtype=float)
    Omega = np.zeros((N, N))
    ones = np.ones(N)
    I = np.eye(N)
    trace = []
    prev = None
    converged = False
    lam = rnorm = None
    mu = Upsilon = None
    k = 0
    for k in range(1, opts.max_iters + 1):
        mu = (I - Omega) @ ones / N
        Phi_o = I - np.outer(mu, ones) - Omega
        Upsilon = _ridge_solve(Phi_o @ S, S.T @ S, lam_star)
        KU = K @ Upsilon
        S = _ridge_solve(Phi_o.T @ KU, Upsilon.T @ KU, lam_star)
        P_rho = I - np.outer(mu, ones) - Upsilon @ S.T
        sq = _quad_diag(P_rho, K)
        if sq.min() < -NEG_RHO_TOL * max(1.0, float(np.abs(np.diag(K)).max())):
            raise ValueError("negative residual norm: Gram matrix is not PSD")
        rnorm = np.sqrt(np.maximum(sq, 0.0))
        lam = np.zeros(N)
        big = rnorm > lambda2 / 2
        lam[big] = (rnorm[big] - lambda2 / 2) / rnorm[big]
        Omega = P_rho * lam[None, :]
        obj = kernel_objective(K, mu, Upsilon, S, Omega, lam_star, lambda2)
        trace.append(obj)
        if callback is not None:
            callback(k, mu, Upsilon, S, Omega)
        if prev is not None and abs(prev - obj) <= opts.rel_tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = obj
    return KernelModel(mu, Upsilon, S, Omega, float(lam_star), float(lambda2),
                       trace if opts.record_trace else trace[-1:], k, converged, lam, rnorm)


def outlier_norms(model, K):
    """``||o_n||`` from ``diag(Omega' K Omega)``; exactly zero for zero columns."""
    K = _kmat(K)
    norms = np.sqrt(np.maximum(_quad_diag(model.Omega, K), 0.0))
    norms[~np.any(model.Omega != 0, axis=0)] = 0.0
    return norms


def project(model, k_x, K):
    """Scores ``Upsilon' k_x - Upsilon' K mu`` of a new point with kernel vector ``k_x``."""
    K = _kmat(K)
    k_x = np.asarray(k_x, dtype=float)
    if k_x.shape != (K.shape[0],):
        raise ValueError(f"kernel vector has length {k_x.size}, expected {K.shape[0]}")
    return model.Upsilon.T @ k_x - model.Upsilon.T @ (K @ model.mu)


@dataclass
class Clustering:
    labels: np.ndarray
    kept: np.ndarray

    def ari(self, truth):
        """Adjusted Rand index against ``truth`` over the kept rows."""
        from sklearn.metrics import adjusted_rand_score

        truth = np.asarray(truth)
        return float(adjusted_rand_score(truth[self.kept], self.labels[self.kept]))


def embed_and_cluster(model, K, n_clusters, exclude_outliers=True, seed=0, n_init=50):
    """k-means++ on the rows of ``Upsilon``.

    With ``exclude_outliers`` rows with nonzero outlier norm are left out
    and labelled ``-1``.
    """
    from sklearn.cluster import KMeans

    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    N = model.Upsilon.shape[0]
    kept = np.ones(N, dtype=bool)
    if exclude_outliers:
        kept = outlier_norms(model, K) == 0
    if kept.sum() < n_clusters:
        raise ValueError(f"{int(kept.sum())} rows cannot form {n_clusters} clusters")
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=n_init, random_state=seed)
    labels = np.full(N, -1)
    labels[kept] = km.fit_predict(model.Upsilon[kept])
    return Clustering(labels, kept)
