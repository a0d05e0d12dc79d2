"""Online robust subspace tracking with exponential forgetting.

Each new datum ``x_n`` is split into an outlier ``o(n)`` (a single-group
shrinkage-thresholding step against the current subspace), a score
``s(n)`` (projection onto the current subspace) and a recursive
least-squares update of the subspace with forgetting factor ``beta``.
With ``lambda2 = inf`` the outlier step is skipped and the tracker reduces
to plain projection-approximation subspace tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .batch import fit_batch, plain_pca_fit
from .core import RegularizerKind, SolverOptions, as_data_matrix, orthonormalize, subspace_angle
from .path import compute_path, estimate_lambda_max, lambda_grid, select_by_count, select_by_noise_cov

P0_SCALE = 1e3
IDEMPOTENT_TOL = 1e-8
ETA_RTOL = 1e-12


@dataclass
class TrackerState:
    U: np.ndarray
    P: np.ndarray
    m: np.ndarray
    beta: float
    lambda2: float
    n: int
    weight: float
    reorth_every: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("forgetting factor beta must lie in (0, 1]")
        if not self.lambda2 > 0:
            raise ValueError("lambda2 must be positive (use inf to disable outliers)")
        if np.abs(self.P - self.P.T).max() > 1e-10 * max(1.0, np.abs(self.P).max()):
            raise ValueError("P must be symmetric")

    @property
    def q(self):
        return self.U.shape[1]

    def copy(self):
        return replace(self, U=self.U.copy(), P=self.P.copy(), m=self.m.copy())


@dataclass
class StepOutput:
    s: np.ndarray
    o: np.ndarray
    is_outlier: bool
    reconstruction_error: float


@dataclass
class StreamMetrics:
    n: np.ndarray
    outlier_norm: np.ndarray
    angle: np.ndarray
    error: np.ndarray

    def rows(self):
        return np.column_stack([self.n, self.outlier_norm, self.angle, self.error])


def _eta_derivative(eta, lam, c2, lambda2):
    # d/d eta of eta * (1 - sum c_i^2 / (2 eta lam_i + lambda2^2))
    den = 2.0 * eta * lam + lambda2 ** 2
    return 1.0 - lambda2 ** 2 * float(np.sum(c2 / den ** 2))


def _msto_projection(H, g, lambda2):
    """Closed form when ``H = 2 Pi`` for an orthogonal projector ``Pi``."""
    gr = 0.5 * (H @ g)
    gn = g - gr
    a = float(gn @ gn) / lambda2 ** 2
    if a >= 1.0:
        raise ValueError("shrinkage-thresholding problem is unbounded: "
                         "null-space part of g exceeds lambda2")
    eta = (lambda2 * np.linalg.norm(gr) / np.sqrt(1.0 - a) - lambda2 ** 2) / 4.0
    gamma = lambda2 ** 2 / (2.0 * eta)
    return -(gr / (2.0 + gamma) + gn / gamma)


def msto(H, g, lambda2):
    """Multidimensional shrinkage-thresholding operator.

    Minimizes ``o'Ho/2 + g'o + lambda2 ||o||_2``. The solution is zero iff
    ``||g|| <= lambda2``; otherwise ``o = -(H + gamma I)^{-1} g`` with
    ``gamma = lambda2^2 / (2 eta)`` and ``eta > 0`` minimizing
    ``eta (1 - g'(2 eta H + lambda2^2 I)^{-1} g)``. That scalar objective is
    convex with an increasing derivative, so its stationary point is found
    by bracketing from ``eta0 = lambda2 (||g|| - lambda2) / 4`` (exact when
    ``H`` is twice a projector) and Brent's method.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    if not lambda2 > 0:
        raise ValueError("lambda2 must be positive")
    gnorm = float(np.linalg.norm(g))
    if gnorm <= lambda2:
        return np.zeros_like(g)
    H = 0.5 * (H + H.T)
    if np.linalg.norm(0.5 * H @ H - H) <= IDEMPOTENT_TOL:
        return _msto_projection(H, g, lambda2)
    lam, V = np.linalg.eigh(H)
    lam = np.maximum(lam, 0.0)
    c = V.T @ g
    c2 = c * c
    null = lam <= 1e-12 * max(lam.max(), 1.0)
    if float(c2[null].sum()) >= lambda2 ** 2:
        raise ValueError("shrinkage-thresholding problem is unbounded: "
                         "null-space part of g exceeds lambda2")

    def fprime(eta):
        return _eta_derivative(eta, lam, c2, lambda2)

    eta0 = lambda2 * (gnorm - lambda2) / 4.0
    lo = hi = eta0
    for _ in range(200):
        if fprime(lo) < 0:
            break
        lo *= 0.5
    for _ in range(200):
        if fprime(hi) > 0:
            break
        hi *= 2.0
    if not fprime(lo) < 0 < fprime(hi):
        if fprime(lo) == 0 or fprime(hi) == 0:
            eta = lo if fprime(lo) == 0 else hi
        else:
            raise RuntimeError("line search failed to bracket the optimal eta")
    else:
        eta = brentq(fprime, lo, hi, xtol=1e-300, rtol=ETA_RTOL, maxiter=500)
    gamma = lambda2 ** 2 / (2.0 * eta)
    return -(V @ (c / (lam + gamma)))


def msto_residual(H, g, lambda2, o):
    """Norm of the optimality-system residual for a candidate ``o``."""
    nrm = float(np.linalg.norm(o))
    if nrm == 0:
        return max(float(np.linalg.norm(g)) - lambda2, 0.0)
    return float(np.linalg.norm(H @ o + g + lambda2 * o / nrm))


def initial_weight(n0, beta):
    """Weight sum ``sum_{i<n0} beta^i`` carried by the initial mean."""
    if beta == 1:
        return float(n0)
    return (1.0 - beta ** n0) / (1.0 - beta)


def init_tracker(X_init, q, lambda2=None, beta=0.99, kind=RegularizerKind.ROW_L2,
                 opts=None, noise_cov=None, n_outliers=None, G=50, eps=1e-3,
                 reorth_every=0):
    """Batch initialization on the first ``n0`` rows.

    ``lambda2`` is used as given when supplied (``inf`` gives plain PCA and
    the non-robust tracker). Otherwise a path is computed and ``lambda2``
    is selected by ``noise_cov`` or, failing that, ``n_outliers``. Returns
    ``(state, lambda2)``.
    """
    X_init = as_data_matrix(X_init)
    n0, p = X_init.shape
    if n0 < q:
        raise ValueError(f"need at least q={q} initialization rows, got {n0}")
    opts = opts or SolverOptions(max_iters=500)
    if lambda2 is None:
        if noise_cov is None and n_outliers is None:
            raise ValueError("give lambda2, noise_cov or n_outliers")
        grid = lambda_grid(estimate_lambda_max(X_init, q), eps, G)
        path = compute_path(X_init, q, grid, kind, opts)
        sel = (select_by_noise_cov(path, X_init, noise_cov) if noise_cov is not None
               else select_by_count(path, n_outliers))
        lambda2, fit = sel.lambda2, sel.fit
    elif np.isinf(lambda2):
        fit = plain_pca_fit(X_init, q)
    else:
        fit = fit_batch(X_init, q, lambda2, kind, opts)
    U = orthonormalize(fit.model.U)
    state = TrackerState(U, P0_SCALE * np.eye(q), fit.model.mean.copy(), float(beta),
                         float(lambda2), n0, initial_weight(n0, beta), reorth_every)
    return state, float(lambda2)


def outlier_step(U, m, x, lambda2):
    """``o(n)`` for datum ``x`` against subspace ``U`` and mean ``m``."""
    if np.isinf(lambda2):
        return np.zeros_like(x)
    v = x - m
    r = v - U @ (U.T @ v)
    g = -2.0 * (r - U @ (U.T @ r))
    if np.linalg.norm(g) <= lambda2:
        return np.zeros_like(x)
    A = np.eye(len(x)) - U @ U.T
    return msto(2.0 * A.T @ A, g, lambda2)


def tracker_step(state, x):
    """Process one datum; returns ``(StepOutput, new_state)``.

    The input state is left untouched.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != state.m.shape:
        raise ValueError(f"datum has length {x.size}, expected {state.m.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("datum contains non-finite entries")
    U, P, m, beta = state.U, state.P, state.m, state.beta
    o = outlier_step(U, m, x, state.lambda2)
    v = x - m - o
    s = U.T @ v
    e = v - U @ s
    Ps = P @ s
    k = Ps / (beta + s @ Ps)
    P_new = (P - np.outer(k, Ps)) / beta
    P_new = 0.5 * (P_new + P_new.T)
    U_new = U + np.outer(e, k)
    n = state.n + 1
    if state.reorth_every and n % state.reorth_every == 0:
        U_new = orthonormalize(U_new)
    w = beta * state.weight + 1.0
    m_new = (beta * state.weight * m + (x - o)) / w
    out = StepOutput(s, o, bool(np.linalg.norm(o) > 0), float(e @ e) / x.size)
    return out, replace(state, U=U_new, P=P_new, m=m_new, n=n, weight=w)


def run_stream(state, X_stream, truth_U=None, clean=None):
    """Feed rows of ``X_stream`` through the tracker.

    Returns ``(final_state, StreamMetrics)``. With ``truth_U`` the angle is
    measured between ``span(U(n))`` (orthonormalized) and ``truth_U``;
    otherwise it is NaN. With ``clean`` rows ``y_n`` the error is
    ``||y - m - QQ'(y - m)||^2 / p`` for the orthonormalized ``Q = U(n)``,
    otherwise the step's own fit residual.
    """
    X_stream = as_data_matrix(X_stream)
    T = X_stream.shape[0]
    ns = np.empty(T, dtype=int)
    onorm = np.empty(T)
    angle = np.full(T, np.nan)
    err = np.empty(T)
    for t in range(T):
        out, state = tracker_step(state, X_stream[t])
        ns[t] = state.n
        onorm[t] = np.linalg.norm(out.o)
        Q = None
        if truth_U is not None:
            Q = orthonormalize(state.U)
            angle[t] = subspace_angle(Q, truth_U)
        if clean is not None:
            Q = orthonormalize(state.U) if Q is None else Q
            d = clean[t] - state.m
            d = d - Q @ (Q.T @ d)
            err[t] = float(d @ d) / d.size
        else:
            err[t] = out.reconstruction_error
    return state, StreamMetrics(ns, onorm, angle, err)


def orthonormality_deviation(U):
    """``||U'U - I||_F``."""
    return float(np.linalg.norm(U.T @ U - np.eye(U.shape[1])))
