"""Command line interface: ``clusteriv {estimate,infer,simulate,diagnose}``.

Reports are JSON on stdout (or ``--output``); tabular data is CSV. Failures
print ``{"error": ..., "message": ...}`` to stderr and exit with status 2.
The worker count for Monte Carlo runs defaults to ``$CLUSTERIV_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .centering import build_astar, diagnostics, export_triplets
from .errors import ClusterIVError, MissingColumn, NonFiniteValue
from .estimator import ClusteredDataset, estimate, estimate_ols
from .exclusion import ClusterPartition, from_recipe
from .inference import _jsonable, ar_curve, infer
from .projections import build_projection
from .simulation import build_design, load_config, run_monte_carlo

REQUIRED = ("cluster", "y", "x")
OPTIONAL = ("time", "coord_x", "coord_y")


def load_dataset(path, intercept=True, cluster_fe=False):
    """Read a CSV with columns ``cluster, y, x`` plus optional ``time``,
    ``coord_x, coord_y``; every other column is a control.

    An intercept is added unless ``intercept=False``; ``cluster_fe=True``
    adds cluster dummies instead.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MissingColumn(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise MissingColumn(f"duplicate column(s) in header: {dup}")
    missing = [c for c in REQUIRED if c not in header]
    if missing:
        raise MissingColumn(f"missing required column(s): {missing}")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if any(len(r) != len(header) for r in body):
        raise MissingColumn("ragged rows: every row needs one value per header column")
    cols = {h: [r[j].strip() for r in body] for j, h in enumerate(header)}

    def numeric(name):
        try:
            v = np.array([float(t) for t in cols[name]])
        except ValueError as exc:
            raise NonFiniteValue(f"column {name!r}: {exc}") from exc
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"column {name!r} contains non-finite values")
        return v

    partition = ClusterPartition.from_labels(np.array(cols["cluster"]))
    controls = [h for h in header if h not in REQUIRED + OPTIONAL]
    W = [numeric(h) for h in controls]
    n = partition.n
    if cluster_fe:
        D = np.zeros((n, partition.N))
        D[np.arange(n), partition.assignment] = 1.0
        W = list(D.T) + W
    elif intercept:
        W = [np.ones(n)] + W
    W = np.column_stack(W) if W else np.zeros((n, 0))
    time = numeric("time").astype(np.int64) if "time" in cols else None
    coords = None
    if "coord_x" in cols or "coord_y" in cols:
        if not ("coord_x" in cols and "coord_y" in cols):
            raise MissingColumn("coordinates need both coord_x and coord_y")
        coords = np.column_stack([numeric("coord_x"), numeric("coord_y")])
    return ClusteredDataset.from_arrays(numeric("y"), numeric("x"), W, partition,
                                        time=time, coords=coords)


def write_dataset(data, path, controls=True):
    """Write a dataset in the format read by :func:`load_dataset`."""
    header = ["cluster", "y", "x"]
    cols = [data.partition.assignment, data.y, data.x]
    if data.time is not None:
        header.append("time")
        cols.append(data.time)
    if data.coords is not None:
        header += ["coord_x", "coord_y"]
        cols += [data.coords[:, 0], data.coords[:, 1]]
    if controls:
        for k in range(data.W.K):
            header.append(f"w{k}")
            cols.append(data.W.W[:, k])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _recipe(args):
    recipe = {"kind": args.recipe}
    if args.recipe == "limited_feedback":
        recipe["horizon"] = args.horizon
    if args.recipe == "distance":
        if args.radius is None:
            raise ClusterIVError("--radius is required for the distance recipe")
        recipe["radius"] = args.radius
        recipe["great_circle"] = args.great_circle
    if args.recipe == "pairs":
        if not args.pairs:
            raise ClusterIVError("--pairs is required for the pairs recipe")
        recipe["path"] = args.pairs
    return recipe


def _centering(args, data):
    e = from_recipe(_recipe(args), data.partition, data.time, data.coords)
    M = build_projection(data.W)
    return build_astar(M, e, mode=args.mode, method=args.method), M


def _emit(obj, path):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_estimate(args):
    data = _load(args)
    A, M = _centering(args, data)
    out = {"estimate": estimate(data, A).to_dict()}
    try:
        out["ols"] = estimate_ols(data, M).to_dict()
    except ClusterIVError as exc:
        out["ols"] = {"error": str(exc)}
    _emit(out, args.output)


def cmd_infer(args):
    data = _load(args)
    A, _ = _centering(args, data)
    report = infer(data, A, alpha=args.alpha)
    if args.ar_curve:
        grid, stats = ar_curve(data, A, points=args.grid_points, width=args.grid_width)
        with open(args.ar_curve, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["beta0", "ar_statistic"])
            for g, s in zip(grid, stats):
                w.writerow([repr(float(g)), repr(float(s))])
    _emit(report.to_dict(), args.output)


def cmd_diagnose(args):
    data = _load(args)
    A, _ = _centering(args, data)
    out = diagnostics(A, data.partition).to_dict()
    out["mode"] = A.mode
    if args.triplets:
        out["triplets_written"] = export_triplets(A, args.triplets, threshold=args.threshold)
        out["threshold"] = args.threshold
    _emit(out, args.output)


def cmd_simulate(args):
    spec, run = load_config(args.spec)
    if args.seed is not None:
        run["base_seed"] = args.seed
    if args.replications is not None:
        run["replications"] = args.replications
    workers = args.workers or run.get("workers") or int(os.environ.get("CLUSTERIV_THREADS", 1))
    if args.emit_data:
        data, _ = build_design(spec).draw(spec.seed)
        write_dataset(data, args.emit_data)
    report = run_monte_carlo(
        spec,
        run["recipe"],
        R=int(run.get("replications", 1000)),
        base_seed=int(run.get("base_seed", 0)),
        mode=run.get("mode", "outcome"),
        method=run.get("method", "leaveout"),
        alpha=float(run.get("alpha", 0.05)),
        workers=int(workers),
        keep_draws=bool(args.draws),
    )
    if args.draws:
        report.draws_csv(args.draws)
    _emit(report.to_dict(include_runtime=args.timing), args.output)


def _load(args):
    return load_dataset(args.data, intercept=not args.no_intercept, cluster_fe=args.cluster_fe)


def _alpha(text):
    a = float(text)
    if not 0 < a < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def build_parser():
    parser = argparse.ArgumentParser(prog="clusteriv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("data", help="input CSV (cluster, y, x, [time], [coord_x, coord_y], controls)")
        p.add_argument("--recipe", default="strict",
                       choices=["strict", "contemporaneous", "weak_exogeneity",
                                "limited_feedback", "distance", "pairs"])
        p.add_argument("--horizon", type=int, default=1)
        p.add_argument("--radius", type=float)
        p.add_argument("--great-circle", action="store_true",
                       help="read coordinates as latitude/longitude in degrees")
        p.add_argument("--pairs", help="CSV of zero pairs (row_index, col_index)")
        p.add_argument("--mode", default="outcome", choices=["outcome", "design"])
        p.add_argument("--method", default="leaveout", choices=["leaveout", "blockB", "vec_oracle"])
        p.add_argument("--no-intercept", action="store_true")
        p.add_argument("--cluster-fe", action="store_true", help="add cluster dummies as controls")
        p.add_argument("--output", "-o")

    p = sub.add_parser("estimate", help="point estimate and OLS baseline")
    data_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("infer", help="jackknife variance and AR confidence set")
    data_args(p)
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--ar-curve", help="write the AR statistic over a grid to this CSV")
    p.add_argument("--grid-points", type=int, default=401)
    p.add_argument("--grid-width", type=float, default=10.0, help="half-width in standard errors")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("diagnose", help="trace, Frobenius split and sparsity export of A*")
    data_args(p)
    p.add_argument("--triplets", help="write entries above --threshold as row,col,value")
    p.add_argument("--threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="Monte Carlo run from a key = value config")
    p.add_argument("--spec", required=True)
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int, help="base seed for replications")
    p.add_argument("--workers", type=int)
    p.add_argument("--draws", help="write per-replication draws to this CSV")
    p.add_argument("--emit-data", help="write one generated dataset to this CSV")
    p.add_argument("--timing", action="store_true", help="include runtime in the report")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ClusterIVError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
