"""Command-line entry point.

    hetfed run config.yaml [--seed N] [--out DIR] [--save-checkpoint P]
                           [--load-checkpoint P]
    hetfed sweep config.yaml --epsilon 0.5,0.8 --tmax 1,3,5,10 [--out DIR]
    hetfed compare config.yaml --strategies flexible_search,uniform_prune

Exit codes: 0 success, 1 runtime abort (e.g. non-finite parameters),
2 configuration or usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .aggregate import load_checkpoint, save_checkpoint
from .config import ConfigError, build_experiment, load_config_file, output_dir_of
from .orchestrator import RunResult, run, search_only_run, summarize

_METRIC_COLUMNS = (
    "round",
    "accuracy",
    "mean_mem_util",
    "mean_bw_util",
    "hit_rate",
    "failures",
    "elapsed_s",
    "global_train_loss",
    "mean_local_loss",
    "distill_initial_loss",
    "distill_final_loss",
)

_ASSIGNMENT_COLUMNS = (
    "round",
    "client",
    "spec",
    "param_count",
    "memory_budget_bytes",
    "bandwidth_bits_per_s",
    "mem_util",
    "bw_util",
    "random_tries",
    "hit_tmax",
    "feasible",
    "trained",
    "failed",
    "train_loss",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, columns: tuple[str, ...], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_outputs(out_dir: str, result: RunResult, cfg) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    metric_rows = [
        (
            m.round,
            m.accuracy,
            m.mean_mem_util,
            m.mean_bw_util,
            m.hit_rate,
            m.failures,
            m.elapsed_s,
            m.global_train_loss,
            m.mean_local_loss,
            m.distill_initial_loss,
            m.distill_final_loss,
        )
        for m in result.metrics
    ]
    _write_csv(os.path.join(out_dir, "metrics.csv"), _METRIC_COLUMNS, metric_rows)

    assignment_rows = [
        (
            m.round,
            a.client,
            str(a.spec),
            a.param_count,
            a.budget.memory_bytes,
            a.budget.bandwidth_bits_per_s,
            a.mem_util,
            a.bw_util,
            a.random_tries,
            a.hit_tmax,
            a.feasible,
            a.trained,
            a.failed,
            a.train_loss,
        )
        for m in result.metrics
        for a in m.assignments
    ]
    _write_csv(os.path.join(out_dir, "assignments.csv"), _ASSIGNMENT_COLUMNS, assignment_rows)

    summary = summarize(result, cfg)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _print_notices(notices: list[str]) -> None:
    if notices:
        print(f"config: using defaults for {', '.join(notices)}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    doc = load_config_file(args.config)
    cfg, notices = build_experiment(doc, seed=args.seed)
    _print_notices(notices)

    initial_store = None
    if args.load_checkpoint:
        try:
            initial_store, dims = load_checkpoint(args.load_checkpoint)
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        space = cfg.space
        expect = {
            "in_dim": space.in_dim,
            "hidden": space.hidden_width,
            "depth": space.hidden_depth,
            "classes": space.classes,
        }
        if dims != expect:
            raise ConfigError(
                f"checkpoint dimensions {dims} do not match the configured space {expect}"
            )

    result = run(cfg, initial_store=initial_store)
    out_dir = args.out or output_dir_of(doc)
    summary = _write_outputs(out_dir, result, cfg)
    if args.save_checkpoint:
        save_checkpoint(result.store, cfg.space, args.save_checkpoint)
    print(
        f"{cfg.strategy}: final accuracy {summary['final_accuracy']:.4f} "
        f"over {cfg.rounds} rounds -> {out_dir}"
    )
    return 0


def _parse_number_list(text: str, kind, flag: str):
    try:
        values = [kind(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag}: {exc}") from exc
    if not values:
        raise ConfigError(f"{flag} must list at least one value")
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    doc = load_config_file(args.config)
    cfg, notices = build_experiment(doc, seed=args.seed)
    _print_notices(notices)
    epsilons = _parse_number_list(args.epsilon, float, "--epsilon")
    t_maxes = _parse_number_list(args.tmax, int, "--tmax")

    rows = []
    for eps in epsilons:
        if not 0.0 <= eps <= 1.0:
            raise ConfigError(f"--epsilon value {eps} must lie in [0, 1]")
        for t_max in t_maxes:
            if t_max < 0:
                raise ConfigError(f"--tmax value {t_max} must be >= 0")
            cell = search_only_run(cfg, eps, t_max)
            rows.append(
                (eps, t_max, cell["mean_mem_util"], cell["mean_bw_util"], cell["hit_rate"])
            )

    out_dir = args.out or output_dir_of(doc)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep.csv")
    _write_csv(path, ("epsilon", "t_max", "mean_mem_util", "mean_bw_util", "hit_rate"), rows)
    print(f"sweep grid ({len(rows)} cells) -> {path}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    doc = load_config_file(args.config)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if len(strategies) < 2:
        raise ConfigError("--strategies needs at least two entries")

    rows = []
    for strategy in strategies:
        cfg, notices = build_experiment(doc, seed=args.seed, strategy=strategy)
        _print_notices(notices)
        result = run(cfg)
        s = summarize(result, cfg)
        rows.append(
            (
                strategy,
                s["final_accuracy"],
                s["best_accuracy"],
                s["mean_mem_util"],
                s["mean_bw_util"],
                s["hit_rate"],
                s["total_failures"],
                s["simulated_s"],
                s["stream_hashes"]["selection"],
                s["stream_hashes"]["budgets"],
            )
        )

    out_dir = args.out or output_dir_of(doc)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "compare.csv")
    _write_csv(
        path,
        (
            "strategy",
            "final_accuracy",
            "best_accuracy",
            "mean_mem_util",
            "mean_bw_util",
            "hit_rate",
            "failures",
            "simulated_s",
            "selection_hash",
            "budget_hash",
        ),
        rows,
    )
    for row in rows:
        print(f"{row[0]}: final accuracy {row[1]:.4f}")
    print(f"comparison table -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetfed",
        description="System-heterogeneous federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run_p.add_argument("--save-checkpoint", default=None, metavar="PATH")
    run_p.add_argument("--load-checkpoint", default=None, metavar="PATH")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="search-only epsilon/t_max grid (no training)")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--epsilon", required=True, help="comma-separated list")
    sweep_p.add_argument("--tmax", required=True, help="comma-separated list")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--out", default=None)
    sweep_p.set_defaults(func=cmd_sweep)

    cmp_p = sub.add_parser("compare", help="run several strategies on shared random streams")
    cmp_p.add_argument("config")
    cmp_p.add_argument("--strategies", required=True, help="comma-separated list (>= 2)")
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--out", default=None)
    cmp_p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
