"""Command-line entry point: ``gtrxl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .blocks import StackConfig, param_report
from .checks import gradient_suite, oracle_suite
from .harness import (
    ExperimentConfig,
    HarnessError,
    evaluate_checkpoint,
    load_config,
    parse_json,
    rank_runs,
    run_experiment,
    write_ranking,
)
from .tensor import ContractError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtrxl", description="Gated Transformer-XL experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    train = sub.add_parser("train", help="run every (seed, learning rate) pair of an experiment config")
    train.add_argument("--config", required=True, help="experiment JSON file")
    train.add_argument("--seed", type=int, help="base seed (overrides train.seed)")
    train.add_argument("--out", help="output directory (overrides out_dir)")
    train.add_argument("--workers", type=int, help="parallel runs (overrides workers)")

    ev = sub.add_parser("eval", help="evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--episodes", type=int, default=200, help="episodes (numpad) or samples (copy)")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="write the result as JSON here instead of stdout")

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)

    oc = sub.add_parser("oracle-check", help="compare vectorized ops against loop oracles")
    oc.add_argument("--seed", type=int, default=0)

    rank = sub.add_parser("rank", help="rank runs by windowed mean return at checkpoint steps")
    rank.add_argument("--metrics", required=True, help="directory of metrics JSONL files")
    rank.add_argument("--checkpoints", required=True, help="comma-separated step list, e.g. 1000,5000")
    rank.add_argument("--out", help="CSV path (default: stdout)")

    pc = sub.add_parser("param-count", help="per-component parameter breakdown")
    pc.add_argument("--config", required=True, help="experiment JSON or a bare stack JSON")
    return p


def _stack_from_file(path: str) -> StackConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise HarnessError(f"cannot read config {path}: {exc}") from exc
    data = parse_json(text, path)
    if "stack" in data:
        return ExperimentConfig.from_dict(data).stack
    try:
        return StackConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise HarnessError(f"bad stack config: {exc}") from exc


def _run_suite(results) -> int:
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    for s in run_experiment(config):
        status = "diverged" if s.diverged else "ok"
        print(f"{s.run_id}: step={s.last_step} mean_return={s.mean_return:.4f} {status} -> {s.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    result = evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)
    text = json.dumps(result, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_rank(args) -> int:
    try:
        steps = [int(s) for s in args.checkpoints.split(",") if s.strip()]
    except ValueError as exc:
        raise HarnessError(f"--checkpoints must be integers: {exc}") from exc
    if not Path(args.metrics).is_dir():
        raise HarnessError(f"metrics directory {args.metrics} does not exist")
    rows = rank_runs(args.metrics, steps)
    if not rows:
        print(f"no runs found in {args.metrics}; nothing to rank")
        return 0
    write_ranking(rows, args.out if args.out else sys.stdout)
    return 0


def _cmd_param_count(args) -> int:
    config = _stack_from_file(args.config)
    print(param_report(config))
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grad-check": lambda a: _run_suite(gradient_suite(a.seed)),
    "oracle-check": lambda a: _run_suite(oracle_suite(a.seed)),
    "rank": _cmd_rank,
    "param-count": _cmd_param_count,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (HarnessError, ContractError, ValueError, OSError) as exc:
        print(f"gtrxl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
