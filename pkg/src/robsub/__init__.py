"""Robust principal component analysis via outlier-sparsity regularization.

Batch, rank-controlled, online and kernel solvers sharing one data model:
``X = 1 m' + S U' + O + E`` with a sparse outlier matrix ``O``.
"""

from .batch import BatchFit, fit_batch, l0_enumeration, l0_lambda_interval, lts_bruteforce, refine_reweighted
from .core import (
    FactorModel,
    OutlierMatrix,
    RegularizerKind,
    SolverOptions,
    huber_vector_loss,
    objective_value,
    row_soft_threshold,
    subspace_angle,
)
from .kernel import fit_kpca, graph_gram, outlier_norms, rbf_gram
from .online import init_tracker, msto, run_stream, tracker_step
from .path import compute_path, lambda_grid, select_by_count, select_by_noise_cov
from .rank import check_certificate, fit_rank, spcp_reference

__version__ = "0.1.0"

__all__ = [
    "BatchFit", "FactorModel", "OutlierMatrix", "RegularizerKind", "SolverOptions",
    "check_certificate", "compute_path", "fit_batch", "fit_kpca", "fit_rank", "graph_gram",
    "huber_vector_loss", "init_tracker", "l0_enumeration", "l0_lambda_interval",
    "lambda_grid", "lts_bruteforce", "msto", "objective_value", "outlier_norms", "rbf_gram",
    "refine_reweighted", "row_soft_threshold", "run_stream", "select_by_count",
    "select_by_noise_cov", "spcp_reference", "subspace_angle", "tracker_step",
]
