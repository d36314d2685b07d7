"""Command-line entry point.

Subcommands: generate | fit | score | benchmark | density.  Every command
takes a fixed default seed, so runs are reproducible unless a seed is
passed explicitly.  --deterministic pins BLAS pools to one thread and
zeroes wall-clock fields in the outputs so repeated runs are
byte-identical; --threads caps the BLAS pools (GMM_THREADS is the
environment fallback).

Exit codes: 0 success, 1 solver failure, 2 usage or file errors.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io as rio
from . import model as gm
from .em import EmConfig, KppConfig, fit_em, kmeanspp_init
from .rtr import TcgConfig, TrConfig, fit_rntr


class UsageError(ValueError):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if v <= 0.0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _eccentricity(text: str) -> float:
    v = float(text)
    if v < 1.0:
        raise argparse.ArgumentTypeError(f"eccentricity must be at least 1, got {v}")
    return v


def _thread_limit(args) -> contextlib.AbstractContextManager:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("GMM_THREADS")
        threads = int(env) if env else None
    if getattr(args, "deterministic", False):
        threads = 1
    if threads is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def _init_hash(params: gm.GmmParams) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(params.weights).tobytes())
    h.update(np.ascontiguousarray(params.means).tobytes())
    for c in params.covariances:
        h.update(np.ascontiguousarray(c.entries).tobytes())
    return h.hexdigest()


def cmd_generate(args) -> int:
    spec = ex.SimSpec(
        dim=args.dim,
        n_components=args.components,
        n_samples=args.samples,
        separation=args.separation,
        eccentricity=args.eccentricity,
        seed=args.seed,
    )
    truth, data, labels = ex.generate_mixture(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_path = out.with_suffix(".csv")
    truth_path = out.with_suffix(".truth.json")
    rio.save_data_csv(data_path, data.points)
    rio.save_model_json(
        truth_path,
        truth,
        meta={"solver": "truth", "seed": args.seed, "spec": asdict(spec) | {"weights": None}},
        extra={"labels": labels.tolist()},
    )
    print(f"wrote {data_path} and {truth_path}")
    return 0


def _load_points(path: str, normalize: bool):
    points = rio.load_data_csv(path)
    normalization = None
    if normalize:
        means = points.mean(axis=0)
        sds = points.std(axis=0, ddof=0)
        if np.any(sds == 0.0):
            raise UsageError("cannot z-score a constant column")
        points = (points - means) / sds
        normalization = {"means": means.tolist(), "sds": sds.tolist()}
    return points, normalization


def cmd_fit(args) -> int:
    points, normalization = _load_points(args.data, args.normalize)
    data = gm.augment(points)
    penalty = None if args.no_penalty else gm.build_penalty_config(data)
    init = kmeanspp_init(data, args.components, KppConfig(seed=args.seed))

    if args.solver == "em":
        cfg = EmConfig(
            max_iters=args.max_iters,
            all_diff_tol=args.all_diff_tol,
            map_mode=not args.no_map_mode,
        )
        report = fit_em(data, init, cfg, penalty)
    else:
        cfg = TrConfig(
            max_iters=args.max_iters,
            all_diff_tol=args.all_diff_tol,
            grad_tol=args.grad_tol,
            tcg=TcgConfig(precondition=not args.no_precondition),
        )
        report = fit_rntr(data, init, cfg, penalty)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    zero_time = args.deterministic
    meta = rio.summary_dict(report, zero_time=zero_time)
    rio.save_model_json(out.with_suffix(".model.json"), report.params, normalization, meta)
    rio.save_trace_csv(out.with_suffix(".trace.csv"), report.trace)
    summary = meta | {"init_hash": _init_hash(init), "data": str(args.data),
                      "components": args.components, "seed": args.seed,
                      "normalized": bool(args.normalize)}
    rio.save_json(out.with_suffix(".summary.json"), summary)
    print(f"{args.solver}: ALL={report.final_all:.10f} iterations={report.n_iterations} "
          f"termination={report.termination}")
    return 0


def cmd_score(args) -> int:
    params, doc = rio.load_model_json(args.model)
    points = rio.load_data_csv(args.data)
    norm = doc.get("normalization")
    if norm is not None:
        points = (points - np.asarray(norm["means"])) / np.asarray(norm["sds"])
    data = gm.augment(points)
    all_value = gm.objective(gm.forward_transform(params), data) / data.n_samples
    result = {"all": all_value, "n_samples": data.n_samples}
    print(json.dumps(result))
    if args.out:
        rio.save_json(args.out, result)
    return 0


def _suite_cells(doc: dict) -> list[ex.BenchmarkCell]:
    cells = []
    for raw in doc["cells"]:
        cells.append(
            ex.BenchmarkCell(
                dim=int(raw["dim"]),
                n_components=int(raw["n_components"]),
                n_samples=int(raw["n_samples"]),
                separation=float(raw["separation"]),
                eccentricity=float(raw["eccentricity"]),
                runs=int(raw.get("runs", 5)),
                solvers=tuple(raw.get("solvers", ["em", "rntr"])),
            )
        )
    return cells


_RESULT_COLUMNS = [
    "cell", "solver", "runs", "failures", "iterations", "mean_time_s",
    "mean_all", "mean_all_penalized", "mse_weights", "mse_means", "mse_cov",
    "ari", "geodesic", "wmse_weights", "wmse_means", "wmse_cov",
]

_RAW_COLUMNS = [
    "cell", "run", "solver", "seed", "error", "iterations", "accepted",
    "init_time_s", "solve_time_s", "all_value", "all_penalized",
    "mse_weights", "mse_means", "mse_cov", "ari", "geodesic",
    "wmse_weights", "wmse_means", "wmse_cov", "termination",
]


def cmd_benchmark(args) -> int:
    doc = rio.load_json(args.suite)
    try:
        cells = _suite_cells(doc)
        master_seed = int(doc.get("master_seed", args.seed))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed suite file {args.suite}: {exc}") from exc

    rows = ex.run_benchmark(cells, master_seed)
    if args.deterministic:
        rows = [
            type(r)(**(asdict(r) | {"init_time_s": _zero(r.init_time_s),
                                    "solve_time_s": _zero(r.solve_time_s)}))
            for r in rows
        ]
    reports = ex.summarize(rows)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rio.write_rows_csv(
        out / "results.csv",
        _RESULT_COLUMNS,
        [[getattr(rep, c) if c != "cell" else rep.cell for c in _RESULT_COLUMNS] for rep in reports],
    )
    rio.write_rows_csv(
        out / "runs.csv",
        _RAW_COLUMNS,
        [[getattr(r, c) for c in _RAW_COLUMNS] for r in rows],
    )
    failures = sum(1 for r in rows if r.error is not None)
    print(f"wrote {out / 'results.csv'} ({len(reports)} rows, {failures} failed runs)")
    return 0


def _zero(v):
    return None if v is None else 0.0


def cmd_density(args) -> int:
    k_values = [int(v) for v in args.components.split(",") if v]
    if not k_values:
        raise UsageError("--components needs at least one K")
    box_vals = [float(v) for v in args.box.split(",")]
    if len(box_vals) != 4:
        raise UsageError("--box expects x_lo,x_hi,y_lo,y_hi")
    box = ((box_vals[0], box_vals[1]), (box_vals[2], box_vals[3]))
    target = ex.BetaGammaSpec(copula_rho=args.copula_rho)
    grid = ex.density_grid(box, args.grid_points, target)

    rows, mean_sq = ex.run_density_study(
        k_values,
        args.runs,
        grid,
        target,
        n_samples=args.samples,
        master_seed=args.seed,
    )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for k in k_values:
        for solver in ("em", "rntr"):
            ok = [r for r in rows if r.n_components == k and r.solver == solver and r.error is None]
            n_err = sum(1 for r in rows if r.n_components == k and r.solver == solver and r.error)
            if not ok:
                table.append([k, solver, 0, n_err] + [float("nan")] * 5)
                continue
            rmises = np.array([r.rmise for r in ok])
            se = rmises.std(ddof=1) / np.sqrt(len(ok)) if len(ok) > 1 else 0.0
            table.append([
                k, solver, len(ok), n_err,
                float(rmises.mean()), float(se),
                float(np.mean([r.iterations for r in ok])),
                0.0 if args.deterministic else float(np.mean([r.time_s for r in ok])),
                float(np.mean([r.all_value for r in ok])),
            ])
    rio.write_rows_csv(
        out / "rmise.csv",
        ["K", "solver", "runs", "failures", "mean_rmise", "se_rmise",
         "iterations", "mean_time_s", "mean_all"],
        table,
    )
    point_rows = [
        [grid.nodes[i, 0], grid.nodes[i, 1], grid.values[i]]
        + [float(np.sqrt(mean_sq[i, s])) for s in range(mean_sq.shape[1])]
        for i in range(grid.n_points)
    ]
    rio.write_rows_csv(
        out / "pointwise.csv",
        ["x", "y", "true_density", "rmse_em", "rmse_rntr"],
        point_rows,
    )
    print(f"wrote {out / 'rmise.csv'} and {out / 'pointwise.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riemix",
        description="Gaussian mixture fitting by Riemannian Newton trust-region optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--threads", type=_positive_int, default=None,
                       help="cap BLAS threads (GMM_THREADS env as fallback)")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS and zeroed timing fields")

    p = sub.add_parser("generate", help="sample a synthetic mixture dataset")
    p.add_argument("--dim", type=_positive_int, required=True)
    p.add_argument("--components", type=_positive_int, required=True)
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--separation", type=_positive_float, required=True)
    p.add_argument("--eccentricity", type=_eccentricity, required=True)
    p.add_argument("--out", default="mixture", help="output prefix (default mixture)")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a mixture to a data CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--components", type=_positive_int, required=True)
    p.add_argument("--solver", choices=["em", "rntr"], default="rntr")
    p.add_argument("--normalize", action="store_true", help="z-score each column first")
    p.add_argument("--max-iters", type=_positive_int, default=1500)
    p.add_argument("--all-diff-tol", type=_positive_float, default=1e-10)
    p.add_argument("--grad-tol", type=float, default=0.0)
    p.add_argument("--no-penalty", action="store_true")
    p.add_argument("--no-map-mode", action="store_true", help="plain EM M-step")
    p.add_argument("--no-precondition", action="store_true")
    p.add_argument("--out", default="fit", help="output prefix (default fit)")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="average log-likelihood of a model on a data CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("benchmark", help="run a benchmark suite from a JSON spec")
    p.add_argument("--suite", required=True)
    p.add_argument("--out-dir", default="benchmark")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("density", help="Beta-Gamma density approximation study")
    p.add_argument("--components", default="2", help="comma-separated K list")
    p.add_argument("--runs", type=_positive_int, default=10)
    p.add_argument("--samples", type=_positive_int, default=1000)
    p.add_argument("--grid-points", type=_positive_int, default=16384)
    p.add_argument("--box", default="0,5,0,10")
    p.add_argument("--copula-rho", type=float, default=0.5)
    p.add_argument("--out-dir", default="density")
    common(p)
    p.set_defaults(func=cmd_density)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
              file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
