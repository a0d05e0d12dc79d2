"""Command-line front end: ``robsub gen|fit|rank|track|kpca``.

Exit codes: 0 success, 2 usage error, 3 numerical failure (including
non-convergence), 4 I/O error. ``ROBSUB_THREADS`` caps BLAS/OpenMP
worker threads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import batch, datagen, kernel, online, path, rank
from .core import RegularizerKind, SolverOptions
from .io import (
    DataFileError,
    RunReport,
    read_edge_list,
    read_matrix,
    read_vector,
    validate_report,
    write_json,
    write_matrix,
    write_sidecar,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def _opts(args):
    return SolverOptions(max_iters=args.max_iters, rel_tol=args.rel_tol, seed=args.seed)


def _emit(args, report):
    d = report.to_dict()
    validate_report(d)
    if args.report:
        write_json(args.report, d, force=args.force)
    else:
        import json

        print(json.dumps({k: d[k] for k in ("metrics", "timing")}, indent=2, sort_keys=True))


def _parse_select(text):
    """``count:K`` or ``noise:sigma2=V`` / ``noise:cov=FILE``."""
    kind, _, rest = text.partition(":")
    if kind == "count":
        return "count", int(rest)
    if kind == "noise":
        key, _, val = rest.partition("=")
        if key == "sigma2":
            return "noise", float(val)
        if key == "cov":
            return "noise_file", val
    raise argparse.ArgumentTypeError(f"bad --select value {text!r}")


def _parse_gram(text):
    kind, _, rest = text.partition(":")
    if kind == "rbf":
        key, _, val = rest.partition("=")
        if key != "c":
            raise argparse.ArgumentTypeError("rbf gram needs c=<width>")
        return "rbf", float(val)
    if kind == "graph":
        if rest in ("", "auto"):
            return "graph", None
        key, _, val = rest.partition("=")
        if key != "zeta":
            raise argparse.ArgumentTypeError("graph gram takes auto or zeta=<shift>")
        return "graph", float(val)
    if kind == "file":
        return "file", rest
    if kind == "linear":
        return "linear", None
    raise argparse.ArgumentTypeError(f"bad --gram value {text!r}")


def _parse_rows(text):
    """1-based inclusive ``a:b`` row range -> 0-based indices."""
    a, _, b = text.partition(":")
    a, b = int(a), int(b or a)
    if a < 1 or b < a:
        raise argparse.ArgumentTypeError(f"bad row range {text!r}")
    return list(range(a - 1, b))


def _lambda2_arg(text):
    if text == "auto":
        return None
    return float(text)


def _out_file(args, name):
    ext = ".bin" if args.binary else ".csv"
    return os.path.join(args.out, name + ext)


def _write_all(args, mats, meta):
    os.makedirs(args.out, exist_ok=True)
    paths = {name: _out_file(args, name) for name in mats}
    if not args.force:
        for p in paths.values():
            if os.path.exists(p):
                raise DataFileError(f"{p} exists; pass --force to overwrite")
    for name, A in mats.items():
        write_matrix(paths[name], A, binary=args.binary, force=True)
    write_sidecar(paths[next(iter(mats))], meta, force=True)
    for p in paths.values():
        print(p)


# ---------------------------------------------------------------- commands

def cmd_gen(args, argv):
    meta = {"generator": args.what, "seed": args.seed, "command": argv}
    if args.what == "lowrank":
        spec = datagen.SynthSpec(args.n, args.p, args.q, args.rho, args.sigma2,
                                 (args.outlier_lo, args.outlier_hi), args.seed)
        X, tr = datagen.gen_lowrank_outliers(spec)
        meta["spec"] = spec.to_dict()
        _write_all(args, {"X": X, "L": tr.L, "O": tr.O, "E": tr.E, "U": tr.U, "S": tr.S}, meta)
    elif args.what == "irt":
        Y, prm = datagen.gen_irt_2plm(args.n, args.p, args.q, args.seed)
        rows = args.aberrant or []
        X = datagen.inject_random_responders(Y, rows, args.rate, args.seed + 1)
        meta.update(N=args.n, p=args.p, q=args.q, aberrant_rows=rows, rate=args.rate)
        _write_all(args, {"X": X, "Y": Y, "aberrant": np.array(rows, dtype=float).reshape(-1, 1)}
                   if rows else {"X": X, "Y": Y}, meta)
    elif args.what == "circles":
        X, y, idx = datagen.gen_concentric(tuple(args.counts), tuple(args.radii), args.sigma2,
                                           args.n_outliers, args.box, args.seed)
        meta.update(counts=args.counts, radii=args.radii, sigma2=args.sigma2,
                    n_outliers=args.n_outliers, box=args.box)
        _write_all(args, {"X": X, "labels": y[:, None]}, meta)
    elif args.what == "stream":
        times = [] if args.outliers is None else args.outliers
        X, tr = datagen.gen_tracking_stream(args.n, args.p, args.q, args.noise_var, times,
                                            (-args.outlier_amp, args.outlier_amp), args.seed)
        meta.update(N=args.n, p=args.p, q=args.q, noise_var=args.noise_var,
                    outlier_rows=times, outlier_amp=args.outlier_amp)
        _write_all(args, {"X": X, "U": tr.U, "Y": tr.Y}, meta)
    return EXIT_OK


def cmd_fit(args, argv):
    X = read_matrix(args.input)
    kind = RegularizerKind.parse(args.reg)
    opts = _opts(args)
    t0 = time.perf_counter()
    metrics = {}
    if args.path:
        lam_max = args.lambda_max or path.estimate_lambda_max(X, args.q)
        grid = path.lambda_grid(lam_max, args.eps, args.grid)
        res = path.compute_path(X, args.q, grid, kind, opts)
        if args.path_csv:
            if os.path.exists(args.path_csv) and not args.force:
                raise DataFileError(f"{args.path_csv} exists; pass --force to overwrite")
            with open(args.path_csv, "w", encoding="utf-8") as fh:
                fh.write(res.to_csv())
        if args.select is None:
            sel = path.Selection(len(grid) - 1, float(grid[-1]), res.fits[-1])
        elif args.select[0] == "count":
            sel = path.select_by_count(res, args.select[1])
        else:
            p = X.shape[1]
            Sigma = (args.select[1] * np.eye(p) if args.select[0] == "noise"
                     else read_matrix(args.select[1]))
            sel = path.select_by_noise_cov(res, X, Sigma, dof_correct=not args.no_dof)
        fit = sel.fit
        metrics.update(selected_index=sel.index, approximate=float(sel.approximate),
                       lambda_max=lam_max, grid_size=len(grid))
    else:
        if args.lambda2 is None:
            raise argparse.ArgumentTypeError("give --lambda2 or --path")
        fit = batch.fit_batch(X, args.q, args.lambda2, kind, opts)
    metrics.update(lambda2=fit.lambda2, objective=fit.objective, iters=fit.iters,
                   converged=float(fit.converged), l0=fit.outliers.l0)
    converged = fit.converged
    if args.refine:
        ref = batch.refine_reweighted(X, fit, delta=args.delta, n_rounds=args.refine, opts=opts)
        metrics.update(refined_objective=ref.objective, refined_l0=ref.outliers.l0)
        fit = ref
    elapsed = time.perf_counter() - t0
    if args.lowrank_out:
        write_matrix(args.lowrank_out, fit.lowrank(), force=args.force)
    report = RunReport(argv, vars_config(args), args.seed, metrics,
                       fit.outliers.row_norms.tolist(), {"fit_seconds": elapsed})
    _emit(args, report)
    if not converged:
        raise NumericalFailure("batch solver hit the iteration cap before converging")
    return EXIT_OK


def cmd_rank(args, argv):
    X = read_matrix(args.input)
    N = X.shape[0]
    kind = RegularizerKind.parse(args.reg)
    lam_star, lambda2 = args.lstar, args.lambda2
    if args.sigma2 is not None:
        ps, pl = rank.noise_presets(N, args.sigma2)
        lam_star = ps if lam_star is None else lam_star
        lambda2 = pl if lambda2 is None else lambda2
    if lam_star is None or lambda2 is None:
        raise argparse.ArgumentTypeError("give --lstar and --lambda2, or --sigma2 for presets")
    t0 = time.perf_counter()
    fit = rank.fit_rank(X, args.qbar, lam_star, lambda2, kind, _opts(args),
                        fit_mean=not args.no_mean)
    timing = {"fit_seconds": time.perf_counter() - t0}
    L = fit.lowrank()
    metrics = {"lam_star": lam_star, "lambda2": lambda2, "objective": fit.objective,
               "iters": fit.iters, "converged": float(fit.converged),
               "effective_rank": int(np.linalg.matrix_rank(L)) if L.any() else 0,
               "l0": fit.outliers.l0}
    if args.certify:
        holds, gap = rank.check_certificate(X, fit, lam_star)
        metrics.update(certificate=float(holds), certificate_gap=gap)
    if args.oracle_spcp:
        t0 = time.perf_counter()
        sp = rank.spcp_reference(X, lam_star, lambda2, kind)
        timing["spcp_seconds"] = time.perf_counter() - t0
        metrics.update(spcp_objective=sp.objective, spcp_dual_residual=sp.dual_residual,
                       spcp_lowrank_diff=float(np.linalg.norm(sp.L - L)) / N,
                       spcp_rel_objective_gap=abs(fit.objective - sp.objective) / abs(sp.objective))
    report = RunReport(argv, vars_config(args), args.seed, metrics,
                       fit.outliers.row_norms.tolist(), timing)
    _emit(args, report)
    if not fit.converged:
        raise NumericalFailure("rank solver hit the iteration cap before converging")
    return EXIT_OK


def _track(X, args, lambda2, truth, clean):
    n0 = args.init
    st, lam = online.init_tracker(
        X[:n0], args.q, lambda2, args.beta, opts=_opts(args),
        noise_cov=None if args.noise_sigma2 is None else args.noise_sigma2 * np.eye(X.shape[1]),
        n_outliers=args.count, reorth_every=args.reorth)
    st, met = online.run_stream(st, X[n0:], truth, None if clean is None else clean[n0:])
    return st, lam, met


def cmd_track(args, argv):
    X = read_matrix(args.input)
    if args.init >= X.shape[0]:
        raise argparse.ArgumentTypeError("--init must leave rows for the online phase")
    truth = None if args.truth is None else read_matrix(args.truth)
    clean = None if args.clean is None else read_matrix(args.clean)
    if truth is not None:
        from .core import orthonormalize

        truth = orthonormalize(truth)
    t0 = time.perf_counter()
    st, lam, met = _track(X, args, args.lambda2, truth, clean)
    timing = {"track_seconds": time.perf_counter() - t0}
    cols = [met.n, met.outlier_norm, met.angle, met.error]
    header = "n,outlier_norm,angle,error"
    metrics = {"lambda2": lam, "n_flagged": int(np.count_nonzero(met.outlier_norm)),
               "final_angle_deg": float(np.degrees(met.angle[-1])),
               "final_error": float(met.error[-1]),
               "orthonormality_deviation": online.orthonormality_deviation(st.U)}
    if args.ablate_nonrobust:
        t0 = time.perf_counter()
        _, _, base = _track(X, args, np.inf, truth, clean)
        timing["ablation_seconds"] = time.perf_counter() - t0
        cols += [base.angle, base.error]
        header += ",angle_nonrobust,error_nonrobust"
        metrics["final_angle_nonrobust_deg"] = float(np.degrees(base.angle[-1]))
    if args.series:
        if os.path.exists(args.series) and not args.force:
            raise DataFileError(f"{args.series} exists; pass --force to overwrite")
        np.savetxt(args.series, np.column_stack(cols), delimiter=",", header=header,
                   comments="", fmt="%.10g")
    report = RunReport(argv, vars_config(args), args.seed, metrics, met.outlier_norm.tolist(), timing)
    _emit(args, report)
    return EXIT_OK


def cmd_kpca(args, argv):
    kind, param = args.gram
    if kind == "file":
        G = kernel.GramMatrix(read_matrix(param))
    elif kind == "graph":
        if args.edges is None:
            raise argparse.ArgumentTypeError("graph gram needs --edges")
        G = kernel.graph_gram(read_edge_list(args.edges), param)
    else:
        if args.input is None:
            raise argparse.ArgumentTypeError(f"{kind} gram needs --in")
        X = read_matrix(args.input)
        G = kernel.rbf_gram(X, param) if kind == "rbf" else kernel.linear_gram(X)
    t0 = time.perf_counter()
    model = kernel.fit_kpca(G, args.qbar, args.lstar, args.lambda2, _opts(args))
    timing = {"fit_seconds": time.perf_counter() - t0}
    norms = kernel.outlier_norms(model, G)
    metrics = {"objective": model.objective, "iters": model.iters,
               "converged": float(model.converged), "psd_shift": G.psd_shift,
               "n_outliers": int(np.count_nonzero(norms))}
    if args.cluster:
        cl = kernel.embed_and_cluster(model, G, args.cluster, not args.keep_outliers, args.seed)
        if args.labels_out:
            write_matrix(args.labels_out, cl.labels[:, None], force=args.force)
        if args.ari:
            truth = read_vector(args.ari, dtype=int)
            if truth.size != G.N:
                raise DataFileError(f"{args.ari}: {truth.size} labels for {G.N} points")
            metrics["ari"] = cl.ari(truth)
    report = RunReport(argv, vars_config(args), args.seed, metrics, norms.tolist(), timing)
    _emit(args, report)
    if not model.converged:
        raise NumericalFailure("kernel solver hit the iteration cap before converging")
    return EXIT_OK


def vars_config(args):
    skip = {"func", "report", "force"}
    return {k: v for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------- parser

def _common(p, max_iters=100):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=max_iters)
    p.add_argument("--rel-tol", type=float, default=1e-7)
    p.add_argument("--report", help="write the JSON run report here (default: stdout summary)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    ap = argparse.ArgumentParser(prog="robsub", description="Robust PCA toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic data sets")
    gsub = g.add_subparsers(dest="what", required=True)
    for name in ("lowrank", "irt", "circles", "stream"):
        gp = gsub.add_parser(name)
        gp.add_argument("--out", required=True, help="output directory")
        gp.add_argument("--seed", type=int, default=0)
        gp.add_argument("--binary", action="store_true")
        gp.add_argument("--force", action="store_true")
        gp.set_defaults(func=cmd_gen)
        if name == "lowrank":
            gp.add_argument("--n", type=int, default=200)
            gp.add_argument("--p", type=int, default=200)
            gp.add_argument("--q", type=int, default=20)
            gp.add_argument("--rho", type=float, default=0.01)
            gp.add_argument("--sigma2", type=float, default=0.01)
            gp.add_argument("--outlier-lo", type=float, default=-5.0)
            gp.add_argument("--outlier-hi", type=float, default=5.0)
        elif name == "irt":
            gp.add_argument("--n", type=int, default=1000)
            gp.add_argument("--p", type=int, default=200)
            gp.add_argument("--q", type=int, default=5)
            gp.add_argument("--aberrant", type=_parse_rows,
                            help="1-based inclusive row range a:b redrawn at random")
            gp.add_argument("--rate", type=float, default=0.5)
        elif name == "circles":
            gp.add_argument("--counts", type=int, nargs="+", default=[150, 150, 150])
            gp.add_argument("--radii", type=float, nargs="+", default=[1.0, 2.8, 5.0])
            gp.add_argument("--sigma2", type=float, default=0.15)
            gp.add_argument("--n-outliers", type=int, default=5)
            gp.add_argument("--box", type=float, default=7.0)
        else:
            gp.add_argument("--n", type=int, default=2000)
            gp.add_argument("--p", type=int, default=150)
            gp.add_argument("--q", type=int, default=5)
            gp.add_argument("--noise-var", type=float, default=1e-3)
            gp.add_argument("--outliers", type=_parse_rows, default=_parse_rows("1001:1005"),
                            help="1-based inclusive range of outlier times")
            gp.add_argument("--outlier-amp", type=float, default=0.5)

    f = sub.add_parser("fit", help="batch robust PCA, fixed lambda2 or a path")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--q", type=int, required=True)
    f.add_argument("--lambda2", type=float)
    f.add_argument("--path", action="store_true")
    f.add_argument("--grid", type=int, default=100)
    f.add_argument("--eps", type=float, default=1e-4)
    f.add_argument("--lambda-max", type=float)
    f.add_argument("--select", type=_parse_select, help="count:K | noise:sigma2=V | noise:cov=FILE")
    f.add_argument("--no-dof", action="store_true",
                   help="noise selector without the residual degrees-of-freedom correction")
    f.add_argument("--reg", choices=["row", "entry"], default="row")
    f.add_argument("--refine", type=int, default=0, help="reweighting rounds (0 = none)")
    f.add_argument("--delta", type=float, default=1e-5)
    f.add_argument("--path-csv")
    f.add_argument("--lowrank-out")
    _common(f)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("rank", help="rank-controlled robust PCA")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--qbar", type=int, required=True)
    r.add_argument("--lstar", type=float)
    r.add_argument("--lambda2", type=float)
    r.add_argument("--sigma2", type=float, help="noise variance for the default presets")
    r.add_argument("--reg", choices=["row", "entry"], default="row")
    r.add_argument("--no-mean", action="store_true", help="hold the mean at zero")
    r.add_argument("--certify", action="store_true")
    r.add_argument("--oracle-spcp", action="store_true")
    _common(r, max_iters=1000)
    r.set_defaults(func=cmd_rank)

    t = sub.add_parser("track", help="online robust subspace tracking")
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--q", type=int, required=True)
    t.add_argument("--init", type=int, default=100, help="rows used for batch initialization")
    t.add_argument("--beta", type=float, default=0.99)
    t.add_argument("--lambda2", type=_lambda2_arg, default=None, help="value, inf or auto")
    t.add_argument("--noise-sigma2", type=float, help="auto lambda2 by the noise selector")
    t.add_argument("--count", type=int, help="auto lambda2 by outlier count")
    t.add_argument("--reorth", type=int, default=0, help="re-orthonormalize every T steps")
    t.add_argument("--truth")
    t.add_argument("--clean")
    t.add_argument("--ablate-nonrobust", action="store_true")
    t.add_argument("--series")
    _common(t, max_iters=500)
    t.set_defaults(func=cmd_track)

    k = sub.add_parser("kpca", help="robust kernel PCA")
    k.add_argument("--in", dest="input")
    k.add_argument("--gram", type=_parse_gram, default=("rbf", 10.0),
                   help="rbf:c=V | graph:auto | graph:zeta=V | linear | file:PATH")
    k.add_argument("--edges")
    k.add_argument("--qbar", type=int, default=2)
    k.add_argument("--lstar", type=float, default=1.0)
    k.add_argument("--lambda2", type=float, required=True)
    k.add_argument("--cluster", type=int, default=0)
    k.add_argument("--keep-outliers", action="store_true")
    k.add_argument("--ari")
    k.add_argument("--labels-out")
    _common(k, max_iters=1000)
    k.set_defaults(func=cmd_kpca)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("ROBSUB_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(int(threads)):
                return args.func(args, argv)
        return args.func(args, argv)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (DataFileError, OSError) as exc:
        print(f"robsub: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"robsub: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"robsub: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
