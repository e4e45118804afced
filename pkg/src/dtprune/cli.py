"""Command-line entry point: ``dtprune {demo-toy,prune,ablate-sinkhorn,verify}``.

Exit codes: 0 success, 1 check failed, 2 config error, 3 data error,
4 numerical abort. ``TP_LOG`` (error, info, debug) sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import netlab
from .experiment import (
    ConfigError,
    load_run_config,
    run_ablation,
    run_prune,
    run_toy,
    with_overrides,
    write_ablation_csv,
    write_toy_csv,
)
from .ot_core import DegenerateKernelError
from .pruner import TrainingAborted
from .verify import run_oracle_suite

log = logging.getLogger("dtprune")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

TOY_TARGET = np.array([0.0, 1.0, 0.0])


def _setup_logging() -> None:
    level = os.environ.get("TP_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_demo_toy(args) -> int:
    # the toy problem has no randomness; --seed is accepted and ignored
    rows = run_toy(steps=args.steps, epsilon=args.epsilon)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "toy.csv")
    write_toy_csv(rows, path)
    final = rows[-1]
    mask = np.array(final["mask"])
    print(f"final mask {np.array2string(mask, precision=6)} loss {final['loss']:.6f}")
    print(f"wrote {path}")
    if args.no_check:
        return EXIT_OK
    if np.max(np.abs(mask - TOY_TARGET)) > 1e-2:
        return _fail(EXIT_CHECK, "mask did not converge to (0, 1, 0)")
    return EXIT_OK


def _load(args):
    cfg = load_run_config(args.config)
    return with_overrides(cfg, epsilon=args.epsilon, ratio=args.ratio, seed=args.seed)


def _run_guarded(fn):
    """Map library errors onto the exit-code taxonomy."""
    try:
        return fn()
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config: {exc}")
    except (netlab.DataError, OSError) as exc:
        return _fail(EXIT_DATA, f"data: {exc}")
    except (TrainingAborted, DegenerateKernelError) as exc:
        return _fail(EXIT_NUMERIC, f"numerical: {exc}")


def cmd_prune(args) -> int:
    def go():
        cfg = _load(args)
        out = args.out or cfg.output_dir or "runs/prune"
        outcome = run_prune(cfg, out)
        print(json.dumps(outcome.summary, sort_keys=True))
        return EXIT_OK

    return _run_guarded(go)


def cmd_ablate_sinkhorn(args) -> int:
    def go():
        try:
            steps = [int(v) for v in args.steps_list.split(",") if v.strip()]
        except ValueError:
            raise ConfigError("--steps-list", "expected comma-separated integers")
        if not steps or min(steps) < 1:
            raise ConfigError("--steps-list", "expected positive integers")
        cfg = _load(args)
        out = args.out or cfg.output_dir or "runs/ablation"
        os.makedirs(out, exist_ok=True)
        rows = run_ablation(cfg, steps)
        path = os.path.join(out, "ablation.csv")
        write_ablation_csv(rows, path)
        with open(path) as fh:
            sys.stdout.write(fh.read())
        return EXIT_OK

    return _run_guarded(go)


def cmd_verify(args) -> int:
    results = run_oracle_suite(seed=args.seed, inject_fault=args.inject_fault)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtprune",
                                     description="Pruning with entropic optimal transport masks.")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("demo-toy", help="learn a keep-1-of-3 mask on w = (2, 1, 3)")
    toy.add_argument("--steps", type=int, default=1000)
    toy.add_argument("--epsilon", type=float, default=10.0)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out", default="runs/toy")
    toy.add_argument("--no-check", action="store_true",
                     help="exit 0 even if the mask has not converged")
    toy.set_defaults(func=cmd_demo_toy)

    for name, func, helptext in (
        ("prune", cmd_prune, "prune, derive and finetune from a run config"),
        ("ablate-sinkhorn", cmd_ablate_sinkhorn, "sweep the inner Sinkhorn iterations"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--ratio", type=float, default=None)
        if name == "ablate-sinkhorn":
            p.add_argument("--steps-list", default="1,2,5,10")
        p.set_defaults(func=func)

    ver = sub.add_parser("verify", help="run the randomised oracle suite")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
