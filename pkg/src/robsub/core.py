"""Data model, objectives and shared numerical kernels.

Everything here is a pure function of its inputs. Matrices follow the
row-per-observation convention: ``X`` is ``N x p``, the subspace ``U`` is
``p x q`` and the scores ``S`` are ``N x q``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-8


class RegularizerKind(enum.Enum):
    """Outlier penalty: sum of row 2-norms, or sum of absolute entries."""

    ROW_L2 = "row"
    ENTRY_L1 = "entry"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        value = str(value).lower()
        for kind in cls:
            if value in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown regularizer kind {value!r}")


@dataclass
class SolverOptions:
    max_iters: int = 100
    rel_tol: float = 1e-7
    seed: int = 0
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class FactorModel:
    """Location ``mean``, subspace ``U`` and principal components ``S``."""

    mean: np.ndarray
    U: np.ndarray
    S: np.ndarray
    orthonormal: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        p, q = self.U.shape
        if q > p:
            raise ValueError(f"subspace has q={q} > p={p}")
        if self.mean.shape != (p,):
            raise ValueError("mean length must equal the number of columns of U")
        if self.S.shape[1] != q:
            raise ValueError("scores and subspace disagree on q")
        if self.orthonormal:
            dev = np.linalg.norm(self.U.T @ self.U - np.eye(q))
            if dev > ORTHONORMAL_TOL:
                raise ValueError(f"U is not orthonormal (deviation {dev:.2e})")

    @property
    def q(self):
        return self.U.shape[1]

    def lowrank(self):
        """Fitted low-rank part ``1 m' + S U'``."""
        return self.mean[None, :] + self.S @ self.U.T

    def copy(self):
        return FactorModel(self.mean.copy(), self.U.copy(), self.S.copy(),
                           self.orthonormal)


@dataclass
class OutlierMatrix:
    """Outlier estimate ``O`` with support bookkeeping.

    For ``ROW_L2`` the support is the set of nonzero rows and ``l0`` counts
    them; for ``ENTRY_L1`` ``l0`` counts nonzero entries.
    """

    values: np.ndarray
    kind: RegularizerKind = RegularizerKind.ROW_L2
    row_support: frozenset = field(init=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.kind = RegularizerKind.parse(self.kind)
        self.row_support = frozenset(
            np.flatnonzero(np.linalg.norm(self.values, axis=1) > 0).tolist())

    @classmethod
    def zeros(cls, N, p, kind=RegularizerKind.ROW_L2):
        return cls(np.zeros((N, p)), kind)

    @property
    def row_norms(self):
        return np.linalg.norm(self.values, axis=1)

    @property
    def l0(self):
        if self.kind is RegularizerKind.ENTRY_L1:
            return int(np.count_nonzero(self.values))
        return len(self.row_support)

    def penalty(self):
        return penalty(self.values, self.kind)


def as_data_matrix(X):
    """Validate and return ``X`` as a finite float ``N x p`` array."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"data must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("data contains non-finite entries")
    return X


def _outlier_values(O, shape):
    if O is None:
        return np.zeros(shape)
    values = O.values if isinstance(O, OutlierMatrix) else np.asarray(O, dtype=float)
    if values.shape != shape:
        raise ValueError(f"outlier matrix shape {values.shape} != data shape {shape}")
    return values


def residual_matrix(X, model, O=None):
    """Rows ``x_n - m - U s_n - o_n``."""
    X = np.asarray(X, dtype=float)
    N, p = X.shape
    if model.U.shape[0] != p or model.S.shape[0] != N:
        raise ValueError("model dimensions do not match the data")
    return X - model.lowrank() - _outlier_values(O, X.shape)


def penalty(O, kind):
    O = np.asarray(O, dtype=float)
    if RegularizerKind.parse(kind) is RegularizerKind.ENTRY_L1:
        return float(np.abs(O).sum())
    return float(np.linalg.norm(O, axis=1).sum())


def objective_value(X, model, O, lambda2, kind=RegularizerKind.ROW_L2):
    """Squared Frobenius fit plus ``lambda2`` times the outlier penalty."""
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    R = residual_matrix(X, model, O)
    values = _outlier_values(O, R.shape)
    return float(np.sum(R * R)) + lambda2 * penalty(values, kind)


def huber_vector_loss(r, lambda2):
    """Vector Huber loss: quadratic inside radius ``lambda2/2``, linear outside."""
    nrm = float(np.linalg.norm(r))
    if nrm <= lambda2 / 2:
        return nrm * nrm
    return lambda2 * nrm - lambda2 * lambda2 / 4


def row_soft_threshold(r, tau):
    """Group shrinkage ``r (||r|| - tau)_+ / ||r||``; zero vector maps to zero."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    r = np.asarray(r, dtype=float)
    nrm = np.linalg.norm(r)
    if nrm <= tau or nrm == 0:
        return np.zeros_like(r)
    return r * ((nrm - tau) / nrm)


def entry_soft_threshold(r, tau):
    if np.any(np.asarray(tau) < 0):
        raise ValueError("threshold must be nonnegative")
    r = np.asarray(r, dtype=float)
    return np.sign(r) * np.maximum(np.abs(r) - tau, 0.0)


def threshold_rows(R, tau):
    """Apply :func:`row_soft_threshold` to every row of ``R``.

    ``tau`` is a scalar or a per-row vector of thresholds.
    """
    R = np.asarray(R, dtype=float)
    norms = np.linalg.norm(R, axis=1)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), norms.shape)
    scale = np.zeros_like(norms)
    keep = norms > tau
    scale[keep] = (norms[keep] - tau[keep]) / norms[keep]
    return R * scale[:, None]


def threshold(R, tau, kind):
    """Minimizer of ``||R - O||_F^2 + 2 tau * penalty(O)`` for either penalty."""
    if RegularizerKind.parse(kind) is RegularizerKind.ENTRY_L1:
        tau = np.asarray(tau, dtype=float)
        if tau.ndim == 1:
            tau = tau[:, None]
        return entry_soft_threshold(R, tau)
    return threshold_rows(R, tau)


def svd(A, full_matrices=False):
    """SVD with a deterministic sign convention.

    Each left singular vector is flipped so that its entry of largest
    magnitude is positive; the matching right vector is flipped with it.
    """
    L, d, Rt = np.linalg.svd(np.asarray(A, dtype=float), full_matrices=full_matrices)
    k = min(L.shape[1], Rt.shape[0])
    idx = np.argmax(np.abs(L[:, :k]), axis=0)
    signs = np.sign(L[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    L[:, :k] *= signs
    Rt[:k] *= signs[:, None]
    return L, d, Rt


def procrustes_rotation(A):
    """Orthonormal ``U`` (same shape as ``A``) maximizing ``tr(U'A)``.

    Uses ``U = L R'`` from the economy SVD ``A = L D R'``. Rank-deficient
    inputs get whatever orthonormal completion the SVD provides.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    p, q = A.shape
    if q > p:
        raise ValueError(f"cannot rotate a {p}x{q} matrix onto q > p columns")
    L, _, Rt = svd(A)
    return L @ Rt


def subspace_angle(U1, U2, tol=1e-6):
    """Largest principal angle (radians) between two orthonormal bases."""
    U1 = np.atleast_2d(np.asarray(U1, dtype=float))
    U2 = np.atleast_2d(np.asarray(U2, dtype=float))
    if U1.shape[0] != U2.shape[0]:
        raise ValueError("bases live in different ambient dimensions")
    for U in (U1, U2):
        if np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > tol:
            raise ValueError("subspace_angle expects orthonormal bases")
    if U1.shape[1] != U2.shape[1]:
        raise ValueError("bases must have the same number of columns")
    cos_min = float(np.linalg.svd(U1.T @ U2, compute_uv=False).min())
    sin_max = float(np.linalg.norm(U2 - U1 @ (U1.T @ U2), 2))
    return float(np.arctan2(sin_max, cos_min))


def orthonormalize(U):
    """Orthonormal basis for ``span(U)`` via QR, columns sign-normalized."""
    Q, R = np.linalg.qr(np.asarray(U, dtype=float))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def pca(X, q):
    """Plain PCA: sample mean, top-``q`` right singular vectors, scores."""
    X = as_data_matrix(X)
    m = X.mean(axis=0)
    Xc = X - m
    _, _, Rt = svd(Xc, full_matrices=q > min(Xc.shape))
    U = Rt[:q].T
    return FactorModel(m, U, Xc @ U)


def pca_cost(X, q):
    """Least-squares PCA cost: sum of squared residuals of the best rank-q fit."""
    model = pca(X, q)
    R = residual_matrix(X, model)
    return float(np.sum(R * R))
