"""Command-line entry point: ``casa train | verify | inspect``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np


def _train(args) -> int:
    from .harness import RunConfig, TrainingAborted, run_training

    doc = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    config = RunConfig.from_dict(doc)
    out = Path(args.out) if args.out else Path("runs") / f"{config.algo}-{config.env}-seed{config.seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    start = time.perf_counter()
    try:
        result = run_training(config, out)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    mean = result.final_mean_return()
    print(f"updates: {config.total_updates}  episodes: {len(result.episode_returns)}  "
          f"mean return (last 100): {mean:.6g}  optimal: {result.optimal_return:.6g}  "
          f"time: {time.perf_counter() - start:.1f}s")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def _verify(args) -> int:
    from .verify import run_suite

    failed = 0
    for name, passed, detail in run_suite(args.suite):
        failed += not passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
    print(f"{'all checks passed' if not failed else f'{failed} check(s) failed'}")
    return 1 if failed else 0


def _inspect(args) -> int:
    from .head import CasaHead

    head = CasaHead.load(args.checkpoint)
    flat = head.params.flat()
    print(f"variant: {head.variant.value}")
    print(f"tau: {head.tau!r}")
    print(f"inputs: {head.n_inputs}  actions: {head.n_actions}  hidden: {list(head.hidden)}")
    print(f"parameters: {flat.size}  l2 norm: {np.linalg.norm(flat):.6g}  max |w|: {np.abs(flat).max():.6g}")
    for name, shape, arr in head.params.segments:
        print(f"  {name:<14} {str(tuple(shape)):<10} mean {arr.mean():+.4g}  std {arr.std():.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casa", description="CASA heads, DR-Trace and gradient diagnostics")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a seeded training job from a JSON config")
    train.add_argument("--config", required=True, help="RunConfig JSON file")
    train.add_argument("--seed", type=int, help="override the config seed")
    train.add_argument("--out", help="output directory (metrics.csv and checkpoints)")
    train.set_defaults(func=_train)

    verify = sub.add_parser("verify", help="run property suites; nonzero exit on failure")
    verify.add_argument("--suite", choices=("gradients", "operators", "identities", "all"), default="all")
    verify.set_defaults(func=_verify)

    inspect = sub.add_parser("inspect", help="summarise a head checkpoint")
    inspect.add_argument("--checkpoint", required=True)
    inspect.set_defaults(func=_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
