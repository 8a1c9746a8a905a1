"""Command-line entry point: simulate, fit, compare, diagnose, ingest.

A JSON config file (--config) may supply any flag by its destination name;
flags given on the command line win over the config file.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, diagnostics, movielens
from .lmm import LmmModel, Theta, information_matrices, speed_matrices
from .runtime import RunConfig, run_dem, run_ecme0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dem", description="Distributed EM fitting for linear mixed models"
    )
    parser.add_argument("--config", help="JSON file of flag defaults (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    p = sub.add_parser("simulate", help="generate a simulated dataset")
    p.add_argument("--m", type=int, required=True, help="number of samples")
    p.add_argument("--n", type=int, required=True, help="total observations")
    p.add_argument("--p", type=int, default=10, help="fixed-effect columns")
    p.add_argument("--q", type=int, default=3, choices=(3, 6),
                   help="random-effect columns")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset path prefix")
    subparsers["simulate"] = p

    p = sub.add_parser("fit", help="fit the mixed model")
    p.add_argument("--data", required=True, help="dataset path prefix")
    p.add_argument("--algo", choices=("ecme0", "iem", "dem"), default="dem")
    p.add_argument("--gamma", type=float, default=None,
                   help="fresh fraction gating each M step (dem only; default 1)")
    p.add_argument("--K", type=int, default=1, help="number of worker subsets")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheduler", choices=("deterministic", "real"),
                   default="deterministic")
    p.add_argument("--transport", choices=("in_process", "socket"),
                   default="in_process")
    p.add_argument("--completion", choices=("restart", "finish"), default="restart")
    p.add_argument("--exact-loglik-check", action="store_true")
    p.add_argument("--forced-split", action="store_true")
    p.add_argument("--allow-maxiter", action="store_true",
                   help="exit 0 even if max_iter was hit")
    p.add_argument("--out", required=True, help="output path prefix")
    subparsers["fit"] = p

    p = sub.add_parser("compare", help="compare fit outputs against the first")
    p.add_argument("runs", nargs="+", help="fit output prefixes; first is reference")
    p.add_argument("--out", required=True, help="CSV output path")
    subparsers["compare"] = p

    p = sub.add_parser("diagnose", help="information/speed-matrix report")
    p.add_argument("--data", required=True, help="dataset path prefix")
    p.add_argument("--theta", required=True, help="fit output .theta.json")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0, help="partition seed")
    p.add_argument("--split", required=True,
                   help="comma-separated subset ids of the fresh block")
    p.add_argument("--out", required=True, help="JSON report path")
    subparsers["diagnose"] = p

    p = sub.add_parser("ingest", help="build per-user samples from ratings")
    p.add_argument("--ratings", help="delimited ratings file")
    p.add_argument("--ratings-dat", help='"::"-separated ratings file')
    p.add_argument("--movies-dat", help='"::"-separated movies file')
    p.add_argument("--out", required=True, help="dataset path prefix")
    subparsers["ingest"] = p

    return parser, subparsers


def _load_dataset(prefix):
    samples, meta = datagen.load_dataset(prefix)
    return samples, meta


def cmd_simulate(args) -> int:
    design = datagen.SimDesign(m=args.m, n=args.n, p=args.p, q=args.q, seed=args.seed)
    samples, truth = datagen.simulate(design)
    datagen.save_dataset(args.out, samples, meta={"seed": args.seed}, truth=truth)
    print(f"wrote {len(samples)} samples / {sum(s.n_obs for s in samples)} "
          f"observations to {args.out}.npz")
    return 0


def cmd_fit(args) -> int:
    samples, meta = _load_dataset(args.data)
    p = int(meta.get("p", samples[0].X.shape[1]))
    q = int(meta.get("q", samples[0].Z.shape[1]))
    model = LmmModel(p, q)
    theta0 = Theta.default_start(p, q)

    if args.algo == "ecme0":
        if args.gamma is not None:
            raise SystemExit("--gamma is incompatible with --algo ecme0")
        config = RunConfig(K=1, tol=args.tol, max_iter=args.max_iter, seed=args.seed)
        theta, trace = run_ecme0(config, model, samples, theta0)
    else:
        gamma = args.gamma
        if args.algo == "iem":
            if gamma is not None:
                raise SystemExit("--gamma is incompatible with --algo iem "
                                 "(it is fixed at 1/K)")
            gamma = 1.0 / args.K
        elif gamma is None:
            gamma = 1.0
        config = RunConfig(
            K=args.K,
            gamma=gamma,
            tol=args.tol,
            max_iter=args.max_iter,
            seed=args.seed,
            scheduler=args.scheduler,
            transport=args.transport,
            completion=args.completion,
            exact_loglik_check=args.exact_loglik_check,
            forced_split=args.forced_split,
        )
        subsets = datagen.partition(samples, args.K, seed=args.seed)
        theta, trace = run_dem(config, model, subsets, theta0)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{out}.theta.json", "w") as fh:
        json.dump(diagnostics.theta_to_json(theta), fh, indent=1)
    diagnostics.write_trace_json(f"{out}.trace.json", trace)
    status = "converged" if trace.converged else "hit max_iter"
    print(f"{args.algo}: {status} after {trace.n_iterations} iterations, "
          f"log likelihood {trace.final_loglik:.6f}")
    if trace.hit_max_iter and not args.allow_maxiter:
        return 1
    return 0


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise SystemExit("compare needs at least two run prefixes")

    def load_run(prefix):
        with open(f"{prefix}.theta.json") as fh:
            theta = diagnostics.theta_from_json(json.load(fh))
        raw = diagnostics.load_trace_json(f"{prefix}.trace.json")
        return theta, raw

    theta_ref, trace_ref = load_run(args.runs[0])
    rows = []
    for prefix in args.runs[1:]:
        theta, trace = load_run(prefix)
        err = diagnostics.compute_err(theta, theta_ref, reference=args.runs[0])
        row = {"run": prefix, **err.as_dict()}
        row["loglik_ratio"] = trace["final_loglik"] / trace_ref["final_loglik"]
        row["iter_ratio"] = trace["n_iterations"] / max(trace_ref["n_iterations"], 1)
        row["time_ratio"] = (
            sum(trace["wall_times"]) / max(sum(trace_ref["wall_times"]), 1e-12)
        )
        row["hit_max_iter"] = trace["hit_max_iter"]
        rows.append(row)
    diagnostics.write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} comparison rows to {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    samples, meta = _load_dataset(args.data)
    with open(args.theta) as fh:
        theta = diagnostics.theta_from_json(json.load(fh))
    model = LmmModel(theta.p, theta.q)
    subsets = datagen.partition(samples, args.K, seed=args.seed)
    split = [int(tok) for tok in args.split.split(",") if tok.strip()]
    info = information_matrices(model, theta, subsets, split)
    speed = speed_matrices(info)
    report = {
        "grad_norm": info.grad_norm,
        "warnings": info.warnings,
        "identity_residual": speed.identity_residual,
        "lam_min_S_EM": speed.lam_min_S_EM,
        "lower_bound": speed.lower_bound,
        "upper_bound": speed.upper_bound,
        "eigen_bounds_ok": speed.eigen_bounds_ok,
        "S_EM": speed.S_EM.tolist(),
        "S_DEM": speed.S_DEM.tolist(),
        "C": speed.C.tolist(),
        "O": speed.O.tolist(),
    }
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1)
    verdict = "ok" if speed.eigen_bounds_ok else "FAILED"
    print(f"identity residual {speed.identity_residual:.3e}, bounds {verdict}")
    for note in info.warnings:
        print(f"warning: {note}", file=sys.stderr)
    return 0


def cmd_ingest(args) -> int:
    if args.ratings_dat:
        if not args.movies_dat:
            raise SystemExit("--ratings-dat requires --movies-dat")
        tmp = f"{args.out}.ratings.csv"
        movielens.convert_dat(args.ratings_dat, args.movies_dat, tmp)
        records = movielens.read_ratings_file(tmp)
    elif args.ratings:
        records = movielens.read_ratings_file(args.ratings)
    else:
        raise SystemExit("ingest needs --ratings or --ratings-dat/--movies-dat")
    by_user = movielens.build_movielens_features(records)
    samples = [by_user[uid] for uid in sorted(by_user)]
    datagen.save_dataset(args.out, samples, meta={"source": "ratings"})
    print(f"wrote {len(samples)} user samples / {len(records)} ratings to "
          f"{args.out}.npz")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "diagnose": cmd_diagnose,
    "ingest": cmd_ingest,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = _build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            defaults = json.load(fh)
        sub = subparsers[args.command]
        known = {a.dest for a in sub._actions}
        bad = set(defaults) - known
        if bad:
            raise SystemExit(f"config keys not recognized for {args.command}: "
                             f"{sorted(bad)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)  # explicit flags override config defaults
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
