import csv
import io
import warnings

import numpy as np
import pytest

from robsub.batch import BatchFit, fit_batch
from robsub.core import FactorModel, OutlierMatrix, SolverOptions, pca, residual_matrix
from robsub.datagen import gen_irt_2plm, inject_random_responders
from robsub.path import (
    PathResult,
    compute_path,
    estimate_lambda_max,
    inverse_sqrt_psd,
    lambda_grid,
    residual_dof_factor,
    select_by_count,
    select_by_noise_cov,
    variance_deviation,
)


def contaminated(seed, N=30, p=10, q=2, n_out=3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, q)) @ rng.standard_normal((q, p))
    X += 0.1 * rng.standard_normal((N, p))
    X[:n_out] += 5 * rng.standard_normal((n_out, p))
    return X


def fake_path(counts):
    N = 4
    fits, norms = [], []
    for c in counts:
        O = np.zeros((N, 2))
        O[:c, 0] = 1.0
        model = FactorModel(np.zeros(2), np.eye(2)[:, :1], np.zeros((N, 1)))
        fits.append(BatchFit(model, OutlierMatrix(O), [float(c)], 1, True))
        norms.append(np.linalg.norm(O, axis=1))
    grid = np.geomspace(8, 1, len(counts))
    return PathResult(grid, fits, np.column_stack(norms), np.array(counts))


# ---------------------------------------------------------------- grid

def test_grid_examples():
    np.testing.assert_allclose(lambda_grid(1.0, 0.01, 3), [1, 0.1, 0.01])
    np.testing.assert_array_equal(lambda_grid(5.0, 0.2, 2), [5.0, 1.0])
    g = lambda_grid(20.0, 1e-2, 200)
    assert len(g) == 200 and g[0] == 20.0 and g[-1] == pytest.approx(0.2)
    assert np.all(np.diff(g) < 0)
    np.testing.assert_allclose(np.diff(np.log(g)), np.log(1e-2) / 199)


@pytest.mark.parametrize("args", [(0.0, 0.1, 3), (1.0, 1.0, 3), (1.0, 0.0, 3), (1.0, 0.1, 1)])
def test_grid_errors(args):
    with pytest.raises(ValueError):
        lambda_grid(*args)


# ---------------------------------------------------------------- lambda_max

def test_lambda_max_exact_rank_is_zero():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((12, 2)) @ rng.standard_normal((2, 5)) + 3.0
    assert estimate_lambda_max(X, 2) <= 1e-10


def test_lambda_max_dominated_by_planted_row():
    rng = np.random.default_rng(1)
    X = 3 * rng.standard_normal((60, 1)) @ rng.standard_normal((1, 6))
    X += 0.01 * rng.standard_normal((60, 6))
    X[7] += 3 * rng.standard_normal(6)
    R = residual_matrix(X, pca(X, 1))
    norms = np.linalg.norm(R, axis=1)
    assert np.argmax(norms) == 7
    assert estimate_lambda_max(X, 1) == pytest.approx(2 * norms[7])


@pytest.mark.parametrize("kind", ["row", "entry"])
def test_lambda_max_fixed_point(kind):
    X = contaminated(2)
    lam = estimate_lambda_max(X, 2)
    fit = fit_batch(X, 2, 1.01 * lam, kind)
    assert fit.outliers.l0 == 0
    path = compute_path(X, 2, lambda_grid(1.01 * lam, 0.1, 5), kind)
    assert path.support_counts[0] == 0


def test_lambda_max_boundary_row_is_a_tie():
    # at exactly lambda_max the largest PCA residual sits on the threshold;
    # from the canonical start only a vanishing outlier survives there
    X = contaminated(2)
    lam = estimate_lambda_max(X, 2)
    fit = fit_batch(X, 2, lam, opts=SolverOptions(max_iters=1000, rel_tol=1e-14))
    assert fit.outliers.row_norms.max() <= 1e-5 * lam


# ---------------------------------------------------------------- compute_path

def test_path_columns_match_fits():
    X = contaminated(3)
    path = compute_path(X, 2, lambda_grid(estimate_lambda_max(X, 2), 1e-2, 15))
    assert path.outlier_norms.shape == (30, 15)
    for g, fit in enumerate(path.fits):
        np.testing.assert_array_equal(path.outlier_norms[:, g], fit.outliers.row_norms)
        assert path.support_counts[g] == np.count_nonzero(fit.outliers.row_norms >= 1e-12)
        assert fit.lambda2 == path.grid[g]
        t = np.asarray(fit.objective_trace)
        assert np.all(np.diff(t) <= 1e-9 * np.abs(t[:-1]))


def test_path_rejects_unsorted_grid():
    X = contaminated(4)
    with pytest.raises(ValueError):
        compute_path(X, 2, [1.0, 2.0])
    with pytest.raises(ValueError):
        compute_path(X, 2, [1.0, 1.0])


def test_warm_start_no_worse_than_cold():
    X = contaminated(5)
    grid = lambda_grid(estimate_lambda_max(X, 2), 1e-2, 20)
    opts = SolverOptions(max_iters=2000, rel_tol=1e-12)
    warm = compute_path(X, 2, grid, opts=opts)
    cold = compute_path(X, 2, grid, opts=opts, warm_start=False)
    assert np.all(warm.objectives <= cold.objectives + 1e-8)


def test_to_csv_roundtrip():
    X = contaminated(6)
    path = compute_path(X, 2, lambda_grid(estimate_lambda_max(X, 2), 0.1, 4))
    rows = list(csv.reader(io.StringIO(path.to_csv())))
    assert rows[0][:3] == ["lambda2", "l0", "objective"] and len(rows[0]) == 33
    assert len(rows) == 5
    for g, row in enumerate(rows[1:]):
        assert float(row[0]) == path.grid[g]
        assert int(row[1]) == path.support_counts[g]
        np.testing.assert_array_equal(np.array(row[3:], float), path.outlier_norms[:, g])


def test_aberrant_rows_enter_support_first():
    Y, _ = gen_irt_2plm(seed=0, N=200, p=60, q=3)
    rows = list(range(20))
    Y = inject_random_responders(Y, rows, seed=1)
    path = compute_path(Y, 3, lambda_grid(estimate_lambda_max(Y, 3), 1e-2, 40))
    # first grid index at which each row turns nonzero
    active = path.outlier_norms >= 1e-12
    entry = np.where(active.any(axis=1), active.argmax(axis=1), len(path.grid))
    aberrant = np.isin(np.arange(200), rows)
    assert np.median(entry[aberrant]) < np.median(entry[~aberrant])


# ---------------------------------------------------------------- count selector

def test_select_by_count_table():
    path = fake_path([0, 1, 2, 4])
    sel = select_by_count(path, 2)
    assert sel.index == 2 and not sel.approximate
    assert sel.lambda2 == path.grid[2]
    assert select_by_count(path, 0).index == 0
    approx = select_by_count(path, 3)
    assert approx.index == 3 and approx.approximate
    with pytest.raises(ValueError):
        select_by_count(path, 5)


def test_select_by_count_deterministic():
    X = contaminated(7)
    grid = lambda_grid(estimate_lambda_max(X, 2), 1e-2, 20)
    a = select_by_count(compute_path(X, 2, grid), 3)
    b = select_by_count(compute_path(X, 2, grid), 3)
    assert a.lambda2 == b.lambda2 and a.index == b.index


# ---------------------------------------------------------------- noise selector

def test_inverse_sqrt_psd():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((4, 4))
    S = A @ A.T + 0.5 * np.eye(4)
    W, clipped = inverse_sqrt_psd(S)
    assert clipped == 0
    np.testing.assert_allclose(W @ S @ W, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(W, W.T)
    _, clipped = inverse_sqrt_psd(np.diag([1.0, 0.0]))
    assert clipped == 1
    with pytest.raises(ValueError):
        inverse_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        inverse_sqrt_psd(-np.eye(2))
    with pytest.raises(ValueError):
        inverse_sqrt_psd(np.ones(3))


def test_whitened_unit_residuals_give_zero():
    # residuals whose sample covariance is exactly I after whitening
    N, p = 12, 3
    rng = np.random.default_rng(9)
    Z = rng.standard_normal((N, p))
    Z -= Z.mean(axis=0)
    Lc = np.linalg.cholesky(np.cov(Z, rowvar=False))
    Z = Z @ np.linalg.inv(Lc).T
    model = FactorModel(np.zeros(p), np.zeros((p, 0)), np.zeros((N, 0)))
    fit = BatchFit(model, OutlierMatrix.zeros(N, p), [0.0], 0, True)
    dev = variance_deviation(Z, fit, np.eye(p), dof_correct=False)
    assert dev == pytest.approx(0.0, abs=1e-10)


def test_monte_carlo_noise_level_criterion_small():
    rng = np.random.default_rng(10)
    N, p, q = 400, 8, 2
    Sigma = np.diag(rng.uniform(0.5, 2.0, p))
    X = rng.standard_normal((N, q)) @ rng.standard_normal((q, p)) * 3
    X += rng.standard_normal((N, p)) @ np.sqrt(Sigma)
    fit = BatchFit(pca(X, q), OutlierMatrix.zeros(N, p), [0.0], 0, True)
    W, _ = inverse_sqrt_psd(Sigma)
    dev = variance_deviation(X, fit, W)
    assert dev < 0.1 * p


def test_dof_factor():
    assert residual_dof_factor(200, 200, 20) == pytest.approx(179 * 180 / (199 * 200))
    assert residual_dof_factor(3, 5, 2) == 1.0


def test_select_by_noise_cov_prefers_clean_point():
    X = contaminated(11, N=60, n_out=4)
    path = compute_path(X, 2, lambda_grid(estimate_lambda_max(X, 2), 1e-2, 30))
    sel = select_by_noise_cov(path, X, 0.01 * np.eye(10))
    assert not np.isnan(sel.criterion[sel.index])
    assert sel.criterion[sel.index] == np.nanmin(sel.criterion)
    assert {0, 1, 2, 3} <= sel.fit.outliers.row_support


def test_select_by_noise_cov_clip_warning_and_skip_error():
    X = contaminated(12)
    path = compute_path(X, 2, lambda_grid(estimate_lambda_max(X, 2), 1e-2, 5))
    Sigma = np.diag([1.0] * 9 + [0.0])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        select_by_noise_cov(path, X, Sigma)
    assert any("clipped" in str(w.message) for w in rec)
    # every row flagged at every grid point
    full = fake_path([4, 4])
    with pytest.raises(ValueError):
        select_by_noise_cov(full, np.zeros((4, 2)), np.eye(2))
