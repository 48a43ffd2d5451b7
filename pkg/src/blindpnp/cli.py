"""Command-line interface: generate data, solve instances, benchmark,
and run the gradient-check suites.

Commands are deterministic given their manifest (fixed seeds): result
columns are bit-reproducible across reruns.  Wall-clock measurements
are the one exception; they live in dedicated runtime columns (solve)
or a separate timings file (benchmark) so the metric tables stay
byte-identical.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import BlindPnpError
from .geometry import Pose, exp_so3, log_so3
from .gradcheck import ALL_CHECKS, run_all
from .losses import LossConfig
from .pipeline import (PipelineConfig, alternation_baseline, pose_errors,
                       quartiles, recall, solve)
from .pose_solvers import RansacConfig
from .synth import PointSets, SynthConfig, generate_instance, load_instance, \
    oracle_cost, save_instance
from .weighted_pnp import PnPSolverConfig

SOLVE_SCHEMA = "blindpnp-solve-v1"
BENCHMARK_SCHEMA = "blindpnp-benchmark-v1"
RECALL_SCHEMA = "blindpnp-recall-v1"
TIMING_SCHEMA = "blindpnp-timing-v1"

_USAGE_EXIT = 1
_FAILURE_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(_USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _default_out() -> str:
    return os.environ.get("BLINDPNP_OUTPUT_DIR", ".")


def _write_manifest(out_dir: str, payload: dict) -> None:
    payload = dict(payload)
    payload["library_version"] = __version__
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        mu=args.mu,
        k_factor=args.k_factor,
        sinkhorn_tol=args.sinkhorn_tol,
        sinkhorn_anneal=args.sinkhorn_anneal,
        ransac=RansacConfig(inlier_threshold=args.ransac_threshold,
                            max_iterations=args.ransac_iterations,
                            confidence=args.ransac_confidence,
                            seed=args.ransac_seed),
        solver=PnPSolverConfig(max_iterations=args.lbfgs_iterations,
                               gradient_tolerance=args.lbfgs_tolerance,
                               newton_polish=args.newton_polish),
        loss=LossConfig(theta=args.theta, gamma_p=args.gamma_p))


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mu", type=float, default=0.1,
                   help="entropy regularization of the transport layer")
    p.add_argument("--k-factor", type=float, default=1.5,
                   help="candidate pool size as a multiple of min(m, n)")
    p.add_argument("--sinkhorn-tol", type=float, default=1e-9)
    p.add_argument("--sinkhorn-anneal", action="store_true",
                   help="warm-start the transport solve from larger mu")
    p.add_argument("--ransac-threshold", type=float, default=0.01)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--ransac-confidence", type=float, default=0.99)
    p.add_argument("--ransac-seed", type=int, default=0)
    p.add_argument("--lbfgs-iterations", type=int, default=200)
    p.add_argument("--lbfgs-tolerance", type=float, default=1e-9)
    p.add_argument("--newton-polish", action="store_true",
                   help="tighten the refined pose with Newton steps")
    p.add_argument("--theta", type=float, default=0.01,
                   help="angular inlier threshold for losses and metrics")
    p.add_argument("--gamma-p", type=float, default=1.0)


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cost", choices=("oracle", "file"), default="oracle",
                   help="cost matrix source")
    p.add_argument("--sharpness", type=float, default=5.0,
                   help="oracle cost on non-matching pairs")
    p.add_argument("--cost-noise", type=float, default=0.0,
                   help="additive Gaussian noise on the oracle cost")
    p.add_argument("--cost-seed", type=int, default=0)
    p.add_argument("--cost-suffix", default=".cost",
                   help="with --cost file, read <instance path><suffix>")


def _collect_instances(paths) -> list[str]:
    files = []
    for path in paths:
        if os.path.isdir(path):
            entries = sorted(os.listdir(path))
            files.extend(os.path.join(path, e) for e in entries
                         if e.startswith("instance_") and e.endswith(".txt"))
        else:
            files.append(path)
    return files


def _instance_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _cost_for(instance: PointSets, path: str, args) -> np.ndarray:
    if args.cost == "oracle":
        return oracle_cost(instance, args.sharpness,
                           noise_sigma=args.cost_noise, seed=args.cost_seed)
    cost_path = path + args.cost_suffix
    M = np.loadtxt(cost_path, ndmin=2)
    if M.shape != (instance.m, instance.n):
        raise BlindPnpError(
            f"cost file {cost_path} has shape {M.shape}, instance needs "
            f"({instance.m}, {instance.n})")
    return M


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    out_dir = args.out
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        print(f"error: output directory {out_dir!r} is not writable: {exc}",
              file=sys.stderr)
        return _FAILURE_EXIT

    names = []
    for offset in range(args.count):
        seed = args.seed + offset
        config = SynthConfig(n_points=args.n_points, seed=seed,
                             pixel_noise_sigma=args.sigma,
                             outlier_fraction=args.outlier_fraction)
        instance = generate_instance(config)
        name = f"instance_{seed:07d}.txt"
        save_instance(instance, os.path.join(out_dir, name))
        names.append(name)
    _write_manifest(out_dir, {
        "command": "generate",
        "config": {"count": args.count, "seed": args.seed,
                   "n_points": args.n_points, "sigma": args.sigma,
                   "outlier_fraction": args.outlier_fraction},
        "instances": names,
    })
    print(f"wrote {len(names)} instance(s) to {out_dir}")
    return 0


# --------------------------------------------------------------------------
# solve


def _solve_one(task):
    """Worker: solve one instance; returns a row dict (no exceptions)."""
    path, args_dict = task
    args = argparse.Namespace(**args_dict)
    row = {"instance": _instance_id(path)}
    try:
        instance = load_instance(path)
        row["m"], row["n"] = instance.m, instance.n
        M = _cost_for(instance, path, args)
        config = _pipeline_config(args)
        result = solve(M, instance, config)
        for prefix, pose in (("ransac", result.ransac_pose),
                             ("refined", result.refined_pose)):
            errs = pose_errors(pose, instance)
            row[f"{prefix}_rotation_deg"] = errs["rotation_deg"]
            row[f"{prefix}_translation"] = errs["translation"]
            row[f"{prefix}_reprojection_deg"] = errs["reprojection_deg"]
        row["sinkhorn_converged"] = result.plan.converged
        row["refine_converged"] = result.refined.converged
        row["low_inlier"] = result.diagnostics["low_inlier"]
        row["runtime_seconds"] = result.diagnostics["total_seconds"]
        row["error"] = ""
    except (BlindPnpError, OSError, ValueError) as exc:
        row["error"] = str(exc).replace("\n", " ")
    return row


_SOLVE_COLUMNS = ["instance", "m", "n",
                  "ransac_rotation_deg", "ransac_translation",
                  "ransac_reprojection_deg", "refined_rotation_deg",
                  "refined_translation", "refined_reprojection_deg",
                  "sinkhorn_converged", "refine_converged", "low_inlier",
                  "runtime_seconds", "error"]


def cmd_solve(args) -> int:
    files = _collect_instances(args.instances)
    if not files:
        print("error: no instance files found", file=sys.stderr)
        return _USAGE_EXIT
    missing = [f for f in files if not os.path.exists(f)]
    if missing:
        print(f"error: missing instance file(s): {missing}", file=sys.stderr)
        return _FAILURE_EXIT
    os.makedirs(args.out, exist_ok=True)

    tasks = [(path, vars(args) | {"instances": None, "func": None})
             for path in files]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_solve_one, tasks))
    else:
        rows = [_solve_one(t) for t in tasks]

    csv_path = os.path.join(args.out, "solve.csv")
    with open(csv_path, "w", newline="", encoding="ascii") as fh:
        fh.write(f"# schema: {SOLVE_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=_SOLVE_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = {}
            for key in _SOLVE_COLUMNS:
                value = row.get(key, "")
                if isinstance(value, str):
                    out[key] = value
                else:
                    out[key] = _fmt(value)
            writer.writerow(out)

    failures = [r for r in rows if r.get("error")]
    ok_rows = [r for r in rows if not r.get("error")]
    summary = {}
    if ok_rows:
        for key in ("refined_rotation_deg", "refined_translation"):
            summary[key + "_quartiles"] = quartiles([r[key] for r in ok_rows])
    _write_manifest(args.out, {
        "command": "solve",
        "config": {k: v for k, v in vars(args).items()
                   if k not in ("func", "instances")},
        "instances": [_instance_id(f) for f in files],
        "failed_instances": [r["instance"] for r in failures],
        "summary": summary,
    })
    print(f"wrote {csv_path} ({len(ok_rows)} solved, {len(failures)} failed)")
    for row in failures:
        print(f"  {row['instance']}: {row['error']}", file=sys.stderr)
    return _FAILURE_EXIT if failures else 0


# --------------------------------------------------------------------------
# benchmark


def _benchmark_one(task):
    path, args_dict = task
    args = argparse.Namespace(**args_dict)
    instance = load_instance(path)
    M = _cost_for(instance, path, args)
    config = _pipeline_config(args)
    result = solve(M, instance, config)

    # deterministic perturbed initialization for the pose-prior baseline
    rng = np.random.default_rng(int(instance.metadata.get("seed", 0)) + 991)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    dr = log_so3(exp_so3(axis * np.radians(args.baseline_init_deg))
                 @ instance.gt_pose.matrix())
    init = Pose(dr, instance.gt_pose.t
                + rng.standard_normal(3) * args.baseline_init_trans)
    alt = alternation_baseline(instance, init, theta=args.theta,
                               time_limit=args.time_limit)

    rows = {}
    for method, pose in (("refined", result.refined_pose),
                         ("ransac", result.ransac_pose),
                         ("alternation", alt.pose)):
        rows[method] = pose_errors(pose, instance)
    runtime = result.diagnostics["total_seconds"]
    return rows, runtime


def cmd_benchmark(args) -> int:
    files = _collect_instances([args.dataset])
    if not files:
        print(f"error: no instances in dataset {args.dataset!r}",
              file=sys.stderr)
        return _USAGE_EXIT
    os.makedirs(args.out, exist_ok=True)
    thresholds = [float(t) for t in args.thresholds.split(",")]

    tasks = [(path, vars(args) | {"func": None}) for path in files]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                outputs = list(pool.map(_benchmark_one, tasks))
        else:
            outputs = [_benchmark_one(t) for t in tasks]
    except (BlindPnpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _FAILURE_EXIT

    methods = ("refined", "ransac", "alternation")
    metrics = ("rotation_deg", "translation", "reprojection_deg")
    bench_path = os.path.join(args.out, "benchmark.csv")
    with open(bench_path, "w", newline="", encoding="ascii") as fh:
        fh.write(f"# schema: {BENCHMARK_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["method"]
                        + [f"{m}_q{q}" for m in metrics for q in (1, 2, 3)])
        for method in methods:
            row = [method]
            for metric in metrics:
                q1, q2, q3 = quartiles([o[0][method][metric] for o in outputs])
                row.extend([_fmt(q1), _fmt(q2), _fmt(q3)])
            writer.writerow(row)

    recall_path = os.path.join(args.out, "recall.csv")
    with open(recall_path, "w", newline="", encoding="ascii") as fh:
        fh.write(f"# schema: {RECALL_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"rot_recall_{_fmt(t)}deg"
                                      for t in thresholds])
        for method in methods:
            rot = [o[0][method]["rotation_deg"] for o in outputs]
            writer.writerow([method] + [_fmt(v) for v in recall(rot, thresholds)])

    # wall-clock measurements are not reproducible; they live here only
    timing_path = os.path.join(args.out, "timings.csv")
    with open(timing_path, "w", newline="", encoding="ascii") as fh:
        fh.write(f"# schema: {TIMING_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["mean_pipeline_seconds"])
        writer.writerow([_fmt(float(np.mean([o[1] for o in outputs])))])

    _write_manifest(args.out, {
        "command": "benchmark",
        "config": {k: v for k, v in vars(args).items() if k != "func"},
        "instances": [_instance_id(f) for f in files],
        "thresholds_deg": thresholds,
    })
    print(f"wrote {bench_path}, {recall_path}, {timing_path}")
    return 0


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    names = args.checks.split(",") if args.checks else None
    if names:
        unknown = [n for n in names if n not in ALL_CHECKS]
        if unknown:
            print(f"error: unknown check(s) {unknown}; available: "
                  f"{sorted(ALL_CHECKS)}", file=sys.stderr)
            return _USAGE_EXIT
    results = run_all(names=names, inject_bug=args.inject_bug,
                      seeds_per_check=args.seeds)
    failed = False
    for result in results:
        print(result.line())
        if not result.passed:
            failed = True
            for failure in result.failures:
                print(f"    reproduce: {failure}")
    return _FAILURE_EXIT if failed else 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blindpnp",
                     description="correspondence-free camera pose toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic instance files")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-points", type=int, default=1000)
    g.add_argument("--sigma", type=float, default=2.0,
                   help="pixel noise standard deviation")
    g.add_argument("--outlier-fraction", type=float, default=0.0)
    g.add_argument("--out", default=_default_out())
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve instance files, write a CSV")
    s.add_argument("instances", nargs="+",
                   help="instance files or directories")
    s.add_argument("--out", default=_default_out())
    s.add_argument("--jobs", type=int, default=1)
    _add_cost_flags(s)
    _add_pipeline_flags(s)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("benchmark",
                       help="quartile/recall tables over a dataset")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", default=_default_out())
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--thresholds", default="5,10,15",
                   help="rotation recall thresholds in degrees")
    b.add_argument("--baseline-init-deg", type=float, default=10.0,
                   help="rotation perturbation of the baseline's init")
    b.add_argument("--baseline-init-trans", type=float, default=0.1)
    b.add_argument("--time-limit", type=float, default=None,
                   help="per-instance wall-clock guard for the baseline")
    _add_cost_flags(b)
    _add_pipeline_flags(b)
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("gradcheck", help="finite-difference check suites")
    c.add_argument("--checks", default=None,
                   help="comma-separated subset of checks")
    c.add_argument("--seeds", type=int, default=None,
                   help="cases per check (default: each check's own)")
    c.add_argument("--inject-bug", default=None, metavar="CHECK",
                   help="corrupt one check's analytic value (harness self-test)")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BlindPnpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
