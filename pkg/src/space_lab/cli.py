"""Command-line front end for seeded experiments.

Subcommands: gen-task, gen-data, train, compare, gradcheck, sweep, report.
Every output lands under the flag-specified paths; nothing is written
elsewhere. Exit codes: 0 success, 1 check/regression failure (including
engine aborts), 2 usage or config errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import oracle
from .charts import line_chart
from .datastore import load_task, make_task, sample_dataset, save_dataset, save_task
from .exceptions import ContractViolation, EngineAbort
from .objectives import objective_from_dict
from .selfplay import (
    METRICS_COLUMNS,
    RunConfig,
    RunManifest,
    run,
    run_config_from_dict,
    write_manifest,
    write_metrics_csv,
)

USAGE_ERROR = 2
CHECK_FAILURE = 1


def max_workers(n_jobs: int) -> int:
    """Worker cap from SPACE_LAB_THREADS (0 or unset means auto)."""
    raw = os.environ.get("SPACE_LAB_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(n_jobs, cap))


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractViolation(f"cannot read JSON from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# gen-task / gen-data
# ---------------------------------------------------------------------------

def cmd_gen_task(args) -> int:
    task = make_task(args.seed, args.vocab, args.length, args.prompts,
                     uniform_target=args.uniform_target)
    save_task(task, args.out)
    print(f"wrote task (vocab={args.vocab}, length={args.length}, "
          f"prompts={args.prompts}, seed={args.seed}) to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    task = load_task(args.task)
    dataset = sample_dataset(task, args.n, seed=args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.n} annotated items to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_CONFIG_OVERRIDES = [
    ("run_seed", "run_seed"),
    ("iterations", "iterations"),
    ("epochs", "epochs_per_iteration"),
    ("batch_size", "batch_size"),
    ("dataset_size", "dataset_size"),
    ("learning_rate", None),  # handled via the optimizer sub-dict
    ("mode", "mode"),
    ("regen_policy", "regen_policy"),
]


def _build_run_config(args, objective_dict=None) -> RunConfig:
    """Assemble a RunConfig with precedence flags > config file > defaults."""
    data = dict(_load_json(args.config)) if getattr(args, "config", None) else {}
    if objective_dict is not None:
        data["objective"] = dict(objective_dict)
    if getattr(args, "objective", None):
        data["objective"] = {"kind": args.objective}
    if getattr(args, "mu", None) is not None:
        obj = dict(data.get("objective", {"kind": "space"}))
        if obj.get("kind", "space") == "space":
            obj["mu"] = args.mu
            data["objective"] = obj
            data["generation_ratio"] = args.mu
    for flag, key in _CONFIG_OVERRIDES:
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "learning_rate":
            opt = dict(data.get("optimizer", {}))
            opt["learning_rate"] = value
            data["optimizer"] = opt
        else:
            data[key] = value
    if data.get("objective", {}).get("kind") == "space":
        data.setdefault("generation_ratio", data["objective"].get("mu", 1.0))
    config = run_config_from_dict(data)
    config.validate()
    return config


def _write_run_outputs(out_dir, manifest: RunManifest, chart: bool) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    write_metrics_csv(manifest.iterations, os.path.join(out_dir, "metrics.csv"))
    if chart and manifest.iterations:
        iters = [r.iteration for r in manifest.iterations]
        line_chart(os.path.join(out_dir, "kl.svg"),
                   [("pre_kl", iters, [r.pre_kl for r in manifest.iterations]),
                    ("post_kl", iters, [r.post_kl for r in manifest.iterations])],
                   "KL to target per iteration", "iteration", "KL (nats)")
        line_chart(os.path.join(out_dir, "rewards.svg"),
                   [("annotated", iters,
                     [r.mean_reward_real for r in manifest.iterations]),
                    ("synthetic", iters,
                     [r.mean_reward_synth for r in manifest.iterations])],
                   "Mean rewards per iteration", "iteration", "reward (nats)")


def cmd_train(args) -> int:
    task = load_task(args.task)
    config = _build_run_config(args)
    try:
        manifest = run(config, task=task)
    except EngineAbort as abort:
        _write_run_outputs(args.out_dir, abort.manifest, args.chart)
        print(f"run aborted: {abort}", file=sys.stderr)
        return CHECK_FAILURE
    _write_run_outputs(args.out_dir, manifest, args.chart)
    final = manifest.iterations[-1]
    print(f"completed {config.iterations} iterations of "
          f"{config.objective.kind}: final post_kl={final.post_kl:.6g}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _run_labeled(label, config, task, out_dir, chart=False):
    try:
        manifest = run(config, task=task)
    except EngineAbort as abort:
        manifest = abort.manifest
    _write_run_outputs(os.path.join(out_dir, label), manifest, chart)
    return label, manifest


def _competition_ranks(values) -> list:
    """Rank 1 = lowest value; ties share a rank; NaN/missing sort last."""
    keyed = [math.inf if (v is None or math.isnan(v)) else v for v in values]
    return [1 + sum(1 for other in keyed if other < v) for v in keyed]


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        print("compare needs at least 2 objective configs", file=sys.stderr)
        return USAGE_ERROR
    task = load_task(args.task)
    jobs = []
    for i, path in enumerate(args.configs):
        objective_dict = _load_json(path)
        config = _build_run_config(args, objective_dict=objective_dict)
        label = f"{i:02d}_{config.objective.kind}"
        jobs.append((label, config))
    os.makedirs(args.out_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max_workers(len(jobs))) as pool:
        futures = [pool.submit(_run_labeled, label, config, task, args.out_dir)
                   for label, config in jobs]
        results = [f.result() for f in futures]

    iterations = max((len(m.iterations) for _, m in results), default=0)
    combined_path = os.path.join(args.out_dir, "combined.csv")
    with open(combined_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + METRICS_COLUMNS)
        for label, manifest in results:
            for record in manifest.iterations:
                row = record.to_dict()
                writer.writerow([label, row["iteration"]]
                                + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]])

    # rank by post_kl at each iteration; methods missing an iteration
    # (aborted runs) rank last for it
    per_iter_ranks = {label: [] for label, _ in results}
    for t in range(iterations):
        values = []
        for label, manifest in results:
            record = manifest.iterations[t] if t < len(manifest.iterations) else None
            values.append(record.post_kl if record is not None else math.nan)
        for (label, _), rank in zip(results, _competition_ranks(values)):
            per_iter_ranks[label].append(rank)

    ranks_path = os.path.join(args.out_dir, "ranks.csv")
    with open(ranks_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "status", "avg_rank", "final_rank"])
        for label, manifest in results:
            ranks = per_iter_ranks[label]
            avg = sum(ranks) / len(ranks) if ranks else math.nan
            final = ranks[-1] if ranks else math.nan
            writer.writerow([label, manifest.status, repr(float(avg)),
                             repr(float(final))])
            if manifest.status != "completed":
                print(f"note: {label} {manifest.status}; ranked last for "
                      f"missing iterations")
    print(f"compared {len(results)} objectives over {iterations} iterations; "
          f"rank table: {ranks_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        print("--seeds must be >= 1", file=sys.stderr)
        return USAGE_ERROR
    worst = oracle.gradient_check_suite(n_seeds=args.seeds, h=args.step)
    failed = False
    for kind, err in worst.items():
        ok = err <= args.tolerance
        failed = failed or not ok
        print(f"{kind:8s} max_rel_err={err:.3e} "
              f"{'PASS' if ok else 'FAIL'} (tolerance {args.tolerance:g})")
    return CHECK_FAILURE if failed else 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    try:
        mu_values = [float(v) for v in args.mu_list.split(",") if v.strip()]
    except ValueError:
        print(f"cannot parse --mu-list {args.mu_list!r}", file=sys.stderr)
        return USAGE_ERROR
    if not mu_values or any(mu <= 0.0 for mu in mu_values):
        print("--mu-list values must be > 0", file=sys.stderr)
        return USAGE_ERROR
    task = load_task(args.task)
    jobs = []
    for mu in mu_values:
        config = _build_run_config(args, objective_dict={"kind": "space", "mu": mu})
        label = f"mu_{mu:g}"
        jobs.append((label, config, mu))
    os.makedirs(args.out_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max_workers(len(jobs))) as pool:
        futures = [pool.submit(_run_labeled, label, config, task, args.out_dir)
                   for label, config, _ in jobs]
        results = [f.result() for f in futures]
    summary_path = os.path.join(args.out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mu", "iteration", "post_kl", "wall_time_s"])
        for (label, manifest), (_, _, mu) in zip(results, jobs):
            for record in manifest.iterations:
                writer.writerow([repr(float(mu)), record.iteration,
                                 repr(float(record.post_kl)),
                                 repr(float(record.wall_time_s))])
    print(f"swept mu in {mu_values}; summary: {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _print_csv(path) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(row[i]) if i < len(row) else 0 for row in rows)
              for i in range(max(len(r) for r in rows))]
    for row in rows:
        print("  ".join(cell.ljust(widths[i])[:18] for i, cell in enumerate(row)))


def cmd_report(args) -> int:
    printed = False
    for name in ("metrics.csv", "combined.csv", "ranks.csv", "summary.csv"):
        path = os.path.join(args.run_dir, name)
        if os.path.exists(path):
            print(f"== {name}")
            _print_csv(path)
            printed = True
    manifest_path = os.path.join(args.run_dir, "manifest.json")
    if os.path.exists(manifest_path):
        data = _load_json(manifest_path)
        print(f"== manifest: status={data.get('status')} "
              f"objective={data.get('config', {}).get('objective', {}).get('kind')} "
              f"hash={data.get('config_hash', '')[:12]}")
        printed = True
    if not printed:
        print(f"no run artifacts found in {args.run_dir}", file=sys.stderr)
        return USAGE_ERROR
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive_int(value):
    parsed = int(value)
    if parsed <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return parsed


def _add_engine_flags(parser):
    parser.add_argument("--run-seed", type=int, dest="run_seed")
    parser.add_argument("--iterations", type=_positive_int)
    parser.add_argument("--epochs", type=_positive_int)
    parser.add_argument("--batch-size", type=_positive_int, dest="batch_size")
    parser.add_argument("--dataset-size", type=_positive_int, dest="dataset_size")
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--mode", choices=["monte-carlo", "exact"])
    parser.add_argument("--regen-policy", choices=["fresh", "fixed"],
                        dest="regen_policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="space-lab",
        description="Self-play fine-tuning laboratory over exactly enumerable "
                    "tabular sequence models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="generate a seeded ground-truth task")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--vocab", type=int, default=3)
    p.add_argument("--length", type=_positive_int, default=3)
    p.add_argument("--prompts", type=_positive_int, default=4)
    p.add_argument("--uniform-target", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("gen-data", help="sample an annotated dataset from a task")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one self-play training experiment")
    p.add_argument("--task", required=True)
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--objective", choices=["space", "spin", "sipo", "ssimpo", "sft"])
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--chart", action="store_true")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="run several objectives on one frozen task")
    p.add_argument("--task", required=True)
    p.add_argument("--configs", nargs="+", required=True,
                   help="objective spec JSON files")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--config", default=None, help="shared engine config JSON")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck",
                       help="analytic vs finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="sweep the generation ratio")
    p.add_argument("--task", required=True)
    p.add_argument("--mu-list", required=True, dest="mu_list")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--config", default=None, help="shared engine config JSON")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the artifacts of a finished run")
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    # argparse validates flag syntax; domain validation happens in the handlers
    if getattr(args, "vocab", None) is not None and args.command == "gen-task":
        if args.vocab < 2:
            print("vocab must be >= 2", file=sys.stderr)
            return USAGE_ERROR
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
