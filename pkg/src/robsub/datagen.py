"""Seeded synthetic data generators.

All randomness comes from ``numpy.random.Generator(PCG64(seed))`` so a
given seed reproduces bit-identical output on any platform running the
same NumPy stream version.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def rng_from_seed(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class SynthSpec:
    N: int = 200
    p: int = 200
    q: int = 20
    rho: float = 0.01
    sigma2: float = 0.01
    outlier_range: tuple = (-5.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if not 1 <= self.q <= min(self.N, self.p):
            raise ValueError("q must lie in [1, min(N, p)]")

    def to_dict(self):
        d = asdict(self)
        d["outlier_range"] = list(self.outlier_range)
        return d


@dataclass
class LowRankTruth:
    L: np.ndarray
    E: np.ndarray
    O: np.ndarray
    U: np.ndarray
    S: np.ndarray


def gen_lowrank_outliers(spec):
    """Low-rank-plus-noise data with Bernoulli-masked uniform outliers.

    ``U`` and ``S`` have i.i.d. zero-mean Gaussian entries with variance
    ``10 sigma_e / sqrt(N)`` (variance, as the protocol states it), noise is
    ``N(0, sigma2)`` and each entry is an outlier with probability ``rho``,
    drawn uniformly from ``outlier_range``. Returns ``X = S U' + E + O`` and
    the ground truth.
    """
    rng = rng_from_seed(spec.seed)
    N, p, q = spec.N, spec.p, spec.q
    var_us = 10.0 * np.sqrt(spec.sigma2) / np.sqrt(N)
    U = rng.normal(0.0, np.sqrt(var_us), size=(p, q))
    S = rng.normal(0.0, np.sqrt(var_us), size=(N, q))
    E = rng.normal(0.0, np.sqrt(spec.sigma2), size=(N, p))
    mask = rng.random((N, p)) < spec.rho
    lo, hi = spec.outlier_range
    O = mask * rng.uniform(lo, hi, size=(N, p))
    L = S @ U.T
    X = L + E + O
    return X, LowRankTruth(L, E, O, U, S)


@dataclass
class IrtParams:
    a: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    factor_of_item: np.ndarray
    prob: np.ndarray


def two_pl_probability(theta, a, b):
    """2PL item response probability ``1 / (1 + exp(-1.7 a (theta - b)))``."""
    z = 1.7 * np.asarray(a) * (np.asarray(theta) - np.asarray(b))
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gen_irt_2plm(N=1000, p=200, q=5, seed=0):
    """Binary responses from a 2PL model with one latent factor per item.

    Item ``m`` loads on factor ``m mod q``; each subject has a
    ``q``-dimensional trait vector. A response is 1 iff its probability is
    at least a uniform deviate.
    """
    rng = rng_from_seed(seed)
    a = rng.uniform(1.0, 1.5, size=p)
    b = rng.uniform(-2.0, 2.0, size=p)
    theta = rng.standard_normal((N, q))
    factor = np.arange(p) % q
    prob = two_pl_probability(theta[:, factor], a[None, :], b[None, :])
    Y = (prob >= rng.random((N, p))).astype(float)
    return Y, IrtParams(a, b, theta, factor, prob)


def inject_random_responders(Y, rows, rate=0.5, seed=0):
    """Replace ``rows`` of ``Y`` by Bernoulli(``rate``) draws."""
    Y = np.asarray(Y, dtype=float)
    rows = np.asarray(sorted(rows), dtype=int)
    if rows.size and (rows.min() < 0 or rows.max() >= Y.shape[0]):
        raise ValueError("row index out of range")
    rng = rng_from_seed(seed)
    X = Y.copy()
    if rows.size:
        X[rows] = (rng.random((rows.size, Y.shape[1])) < rate).astype(float)
    return X


def gen_concentric(counts=(150, 150, 150), radii=(1.0, 2.8, 5.0), sigma2=0.15,
                   n_outliers=5, box=7.0, seed=0):
    """Noisy concentric rings plus uniform outliers appended last.

    Returns ``(X, labels, outlier_idx)``; ring labels are ``0..len(radii)-1``
    and outliers are labelled ``-1``.
    """
    if len(counts) != len(radii):
        raise ValueError("counts and radii must have equal length")
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    rng = rng_from_seed(seed)
    pts, labels = [], []
    for k, (n, r) in enumerate(zip(counts, radii)):
        ang = rng.uniform(0.0, 2 * np.pi, size=n)
        ring = r * np.column_stack([np.cos(ang), np.sin(ang)])
        ring += rng.normal(0.0, np.sqrt(sigma2), size=(n, 2))
        pts.append(ring)
        labels.append(np.full(n, k))
    out = rng.uniform(-box, box, size=(n_outliers, 2))
    n_in = sum(counts)
    X = np.vstack(pts + [out])
    y = np.concatenate(labels + [np.full(n_outliers, -1)])
    return X, y, np.arange(n_in, n_in + n_outliers)


@dataclass
class StreamTruth:
    U: np.ndarray
    mean: np.ndarray
    Y: np.ndarray
    outlier_times: np.ndarray


def gen_tracking_stream(N=2000, p=150, q=5, noise_var=1e-3, outlier_times=range(1000, 1005),
                        outlier_range=(-0.5, 0.5), seed=0):
    """Stationary subspace stream with a burst of uniform outliers.

    Nominal data are ``U s_n + e_n`` with orthonormal ``U``, ``s_n ~ N(0, I_q)``
    and ``e_n ~ N(0, noise_var I_p)``; the rows at ``outlier_times``
    (0-based) are replaced by i.i.d. uniform vectors. Returns ``X`` and the
    truth, whose ``Y`` holds the clean rows.
    """
    rng = rng_from_seed(seed)
    U, _ = np.linalg.qr(rng.standard_normal((p, q)))
    S = rng.standard_normal((N, q))
    Y = S @ U.T + rng.normal(0.0, np.sqrt(noise_var), size=(N, p))
    X = Y.copy()
    times = np.asarray(list(outlier_times), dtype=int)
    lo, hi = outlier_range
    if times.size:
        X[times] = rng.uniform(lo, hi, size=(times.size, p))
    return X, StreamTruth(U, np.zeros(p), Y, times)
