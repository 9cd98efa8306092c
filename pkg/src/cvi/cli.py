"""Command-line interface.

Subcommands: `run` trains replicates from a config file and evaluates metrics;
`reference` builds and caches a reference posterior; `metrics` re-evaluates a
stored run log; `snr` writes the toy-normal gradient signal/noise sweep;
`task export` dumps a task's observation and hyperparameters; and
`gradient-check` audits every estimator/family pair against finite
differences.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .core import ConfigurationError, key_from_seed
from .harness import (
    ExperimentConfig,
    evaluate_record,
    gradient_audit,
    read_records,
    run_suite,
    snr_sweep,
    write_snr_csv,
    write_summary_csv,
)
from .models import make_task
from .reference import cached_reference


def _add_run(sub):
    p = sub.add_parser("run", help="train replicates from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None, help="JSON-lines run log")
    p.add_argument("--summary", default=None, help="CSV metric summary")
    p.add_argument("--seed", type=int, default=None, help="override train.base_seed")
    p.add_argument("--no-metrics", action="store_true")
    p.add_argument("--cache-dir", default=None)


def _add_reference(sub):
    p = sub.add_parser("reference", help="build and cache a reference posterior")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n-ref", type=int, default=10_000)
    p.add_argument("--n-prop", type=int, default=None)
    p.add_argument("--n-chains", type=int, default=None)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--cache-dir", default=None)


def _add_metrics(sub):
    p = sub.add_parser("metrics", help="re-evaluate stored runs against references")
    p.add_argument("--runs", required=True)
    p.add_argument("--index", type=int, default=None, help="single record index")
    p.add_argument("--out", default=None, help="CSV summary path")
    p.add_argument("--cache-dir", default=None)


def _add_snr(sub):
    p = sub.add_parser("snr", help="gradient SNR sweep on the toy normal task")
    p.add_argument("--task", default="toy-normal", choices=["toy-normal"])
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--alphas", default="0.75,1.0")
    p.add_argument("--sweep", default="log-sigma", choices=["log-sigma", "mean"])
    p.add_argument("--n-seeds", type=int, default=1000)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="snr.csv")


def _add_task(sub):
    p = sub.add_parser("task", help="task utilities")
    tsub = p.add_subparsers(dest="task_command", required=True)
    e = tsub.add_parser("export", help="dump observation and hyperparameters")
    e.add_argument("--name", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dim", type=int, default=None)
    e.add_argument("--p", type=int, default=None)
    e.add_argument("--n", type=int, default=None)
    e.add_argument("--out", default=None, help="defaults to stdout")


def _add_gradient_check(sub):
    p = sub.add_parser("gradient-check", help="finite-difference audit of all estimators")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="small subset, for smoke tests")


def _task_options(args) -> dict:
    opts = {}
    for name in ("dim", "p", "n"):
        value = getattr(args, name, None)
        if value is not None:
            opts[name] = value
    return opts


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    if args.seed is not None:
        config.base_seed = args.seed
    records = run_suite(
        config,
        replicates=args.replicates,
        jobs=args.jobs,
        out_path=args.out,
        summary_path=args.summary,
        with_metrics=not args.no_metrics,
        cache_directory=args.cache_dir,
    )
    n_failed = sum(r.status != "ok" for r in records)
    for r in records:
        last = f"{r.loss_trace[-1]:.4f}" if r.loss_trace else "n/a"
        print(f"seed={r.seed} status={r.status} steps={r.steps} final_loss={last}")
    print(f"{len(records) - n_failed}/{len(records)} runs succeeded")
    return 1 if n_failed else 0


def _cmd_reference(args) -> int:
    task = make_task(args.task, key_from_seed(args.seed), **_task_options(args))
    opts = {}
    if args.n_prop is not None:
        opts["n_prop"] = args.n_prop
    if args.n_chains is not None:
        opts["n_chains"] = args.n_chains
    if args.n_steps is not None:
        opts["n_steps"] = args.n_steps
    ref = cached_reference(
        task, key_from_seed(args.seed), seed=args.seed, n_ref=args.n_ref,
        directory=args.cache_dir, **opts,
    )
    print(json.dumps({"kind": ref.kind, "shape": list(ref.samples.shape),
                      "diagnostics": ref.diagnostics}, indent=2))
    return 0


def _cmd_metrics(args) -> int:
    records = read_records(args.runs)
    if args.index is not None:
        records = [records[args.index]]
    for record in records:
        config = ExperimentConfig.from_dict(record.config)
        record.metrics = evaluate_record(config, record, args.cache_dir)
        print(json.dumps({"seed": record.seed, "metrics": record.metrics}))
    if args.out:
        write_summary_csv(records, args.out)
    return 0


def _cmd_snr(args) -> int:
    alphas = [float(a) for a in args.alphas.split(",") if a]
    rows = snr_sweep(
        dim=args.dim, alphas=alphas, sweep=args.sweep,
        n_seeds=args.n_seeds, k=args.k, seed=args.seed,
    )
    write_snr_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_task(args) -> int:
    task = make_task(args.name, key_from_seed(args.seed), **_task_options(args))
    blob = json.dumps(task.export(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(blob + "\n")
        print(f"wrote {args.out}")
    else:
        print(blob)
    return 0


def _cmd_gradient_check(args) -> int:
    ok, rows = gradient_audit(
        n_points=args.points, tol=args.tol, seed=args.seed, quick=args.quick
    )
    for row in rows:
        status = "ok" if row["ok"] else "FAIL"
        name = f"{row['task']}/{row['estimator']}" if row["estimator"] else row["task"]
        print(f"[{status}] {row['check']:28s} {name:32s} err={row['worst_rel_err']:.3g}")
    print("gradient audit:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cvi", description="contrastive variational inference toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_reference(sub)
    _add_metrics(sub)
    _add_snr(sub)
    _add_task(sub)
    _add_gradient_check(sub)
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "reference": _cmd_reference,
        "metrics": _cmd_metrics,
        "snr": _cmd_snr,
        "task": _cmd_task,
        "gradient-check": _cmd_gradient_check,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
