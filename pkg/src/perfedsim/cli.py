"""Command-line front end.

Subcommands: predict (asymptotic limits), simulate (one dataset draw),
sweep (grid of trials), train (iterative loops with closed-form distance),
compare (aggregate a result file against tolerances).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys

import numpy as np

from . import estimators, fedtrain, harness, theory
from .errors import PerfedsimError
from .model import generate_population
from .numerics import substream

_TRAIN_ALGOS = ("fedavg", "ftfa", "rtfa", "maml-fo", "maml-hf", "pfedme", "local")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfedsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="asymptotic bias/variance/risk limits")
    p.add_argument("--algo", required=True, choices=harness.ALGORITHMS)
    p.add_argument("--gamma", required=True, type=float)
    p.add_argument("--r", required=True, type=float)
    p.add_argument("--sigma", required=True, type=float)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="ridge level; omitted = risk-optimal choice")
    p.add_argument("--rho", type=float, default=None,
                   help="purely-local signal norm; omitted = sqrt(r^2 + 1)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("simulate", help="one dataset draw, exact risks vs theory")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="Cartesian sweep of trials")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="iterative training trajectory")
    p.add_argument("--config", required=True)
    p.add_argument("--algo", required=True, choices=_TRAIN_ALGOS)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="aggregate results against tolerances")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    return parser


def _predict(args) -> int:
    rho = args.rho if args.rho is not None else math.sqrt(args.r ** 2 + 1.0)
    lam = args.lam
    if args.algo in ("ftfa", "maml"):
        limit = theory.ftfa_limit(args.r, args.sigma, args.gamma)
    elif args.algo in ("rtfa", "pfedme"):
        if lam is None:
            lam, limit = theory.rtfa_optimal(args.r, args.sigma, args.gamma)
        else:
            limit = theory.rtfa_limit(args.r, args.sigma, args.gamma, lam)
    elif args.algo == "fedavg":
        limit = theory.fedavg_limit(args.r)
    elif args.algo == "naive":
        limit = theory.naive_limit(rho, args.sigma, args.gamma)
    else:
        if lam is None:
            lam, limit = theory.naive_ridge_optimal(rho, args.sigma, args.gamma)
        else:
            limit = theory.naive_ridge_limit(rho, args.sigma, args.gamma, lam)
    limit = dataclasses.replace(limit, algorithm=args.algo)
    if args.json:
        doc = dataclasses.asdict(limit)
        doc["lambda"] = doc.pop("lam")
        print(json.dumps(doc, indent=2))
    else:
        inputs = f"gamma={args.gamma:g} r={args.r:g} sigma={args.sigma:g}"
        if args.algo in ("rtfa", "pfedme", "naive-ridge"):
            inputs += f" lambda={lam:g}"
        if args.algo.startswith("naive"):
            inputs += f" rho={rho:g}"
        print(f"algorithm: {args.algo}")
        print(inputs)
        print(f"bias={limit.bias:.6f}  variance={limit.variance:.6f}  "
              f"risk={limit.risk:.6f}")
    return 0


def _simulate(args) -> int:
    cfg = harness.parse_config(args.config)
    rows = harness.run_trial(cfg.population, cfg.algorithms, cfg.hypers,
                             substream(args.seed, 0))
    for row in rows:
        row.seed = args.seed
    harness.write_rows(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _sweep(args) -> int:
    cfg = harness.parse_config(args.config)
    rows = harness.run_sweep(cfg, jobs=args.jobs)
    harness.write_rows(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _train_config(hypers: dict) -> fedtrain.TrainConfig:
    cfg = fedtrain.TrainConfig()
    if "personal_stepsize" in hypers:
        cfg.personal_stepsize = float(hypers["personal_stepsize"])
    elif "alpha" in hypers:
        cfg.personal_stepsize = float(hypers["alpha"])
    for key, attr, cast in (("rounds", "rounds", int),
                            ("sampled_users", "sampled_users", int),
                            ("local_steps", "local_steps", int),
                            ("batch_size", "batch_size", int),
                            ("global_stepsize", "global_stepsize", float),
                            ("personalization_steps", "personalization_steps", int),
                            ("lambda", "lam", float),
                            ("pfedme_mixing", "pfedme_mixing", float),
                            ("hf_delta", "hf_delta", float),
                            ("shared_batch", "shared_batch", bool),
                            ("init", "init", str)):
        if key in hypers:
            setattr(cfg, attr, cast(hypers[key]))
    return cfg


def _client_risk(client, theta) -> float:
    resid = client.x @ theta - client.y
    return float(resid @ resid) / (2.0 * client.n)


def _train(args) -> int:
    cfg = harness.parse_config(args.config)
    tc = _train_config(cfg.hypers)
    ds = generate_population(cfg.population, substream(args.seed, 0))
    stream = substream(args.seed, 1)
    algo = args.algo

    if algo in ("fedavg", "maml-fo", "maml-hf", "pfedme"):
        if algo == "fedavg":
            traj = fedtrain.fedavg_train(ds, tc, stream)
            target = estimators.fedavg_global(ds).theta
        elif algo == "pfedme":
            traj = fedtrain.pfedme_train(ds, tc, stream)
            target = estimators.pfedme_solve(ds, tc.lam, personal_indices=())[0].theta
        else:
            variant = "first-order" if algo == "maml-fo" else "hessian-free"
            traj = fedtrain.maml_train(ds, tc, stream, variant=variant)
            target = estimators.maml_global(ds, tc.personal_stepsize).theta
        records = [(k, risk_k, float(np.linalg.norm(snap - target)))
                   for k, (snap, risk_k) in enumerate(zip(traj.snapshots, traj.mean_risks))]
    else:
        client = ds.clients[0]
        history: list = []
        if algo == "local":
            fedtrain.local_train(client, tc, stream, history=history)
            target = estimators.naive_minnorm(client, client_index=0).theta
        else:
            warm = estimators.fedavg_global(ds)
            if algo == "ftfa":
                fedtrain.ftfa_train(warm, client, tc, stream, history=history)
                target = estimators.ftfa_personalize(ds, 0, warm).theta
            else:
                fedtrain.rtfa_train(warm, client, tc, stream, history=history)
                target = estimators.rtfa_personalize(ds, 0, warm, tc.lam).theta
        records = [(k, _client_risk(client, snap),
                    float(np.linalg.norm(snap - target)))
                   for k, snap in enumerate(history)]

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "risk", "dist_to_closed_form"])
        for record in records:
            writer.writerow([record[0], repr(float(record[1])), repr(float(record[2]))])
    print(f"wrote {len(records)} rounds to {args.out}; "
          f"final distance {records[-1][2]:.3e}")
    return 0


def _compare(args) -> int:
    summary, table = harness.compare(args.infile)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(table)
    verdict = summary["all_passed"]
    print(f"all_passed: {verdict}")
    return 0 if verdict in (True, None) else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"predict": _predict, "simulate": _simulate, "sweep": _sweep,
                "train": _train, "compare": _compare}
    try:
        return handlers[args.command](args)
    except PerfedsimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
