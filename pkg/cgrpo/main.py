"""Command-line entry point: train, eval, compare and plot."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from .errors import ArgumentError, DivergenceError, GrpoError
from .models.config import RunConfig, load_config, with_overrides
from .services.experiment_service import run_compare, run_eval, run_train
from .services.plot_service import emit_plot

logger = logging.getLogger("cgrpo")

EXIT_OK = 0


class _Parser(argparse.ArgumentParser):
    # usage errors share the validation exit code instead of argparse's 2
    def error(self, message: str):
        raise ArgumentError(message)


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ArgumentError(f"--seeds expects comma-separated integers, got '{text}'") from None
    if len(seeds) < 2:
        raise ArgumentError("--seeds needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise ArgumentError("--seeds contains duplicates")
    return seeds


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    overrides: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        overrides["rollout_workers"] = args.workers
    return with_overrides(config, **overrides) if overrides else config


def cmd_train(args: argparse.Namespace) -> int:
    return run_train(_load(args), resume=args.resume)


def cmd_eval(args: argparse.Namespace) -> int:
    summary = run_eval(args.checkpoint, args.episodes, args.seed, perturbation=args.perturb)
    print(summary.model_dump_json(indent=2))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    report = run_compare(_load(args), parse_seeds(args.seeds))
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    emit_plot(args.csv, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgrpo", description="Continuous group relative policy optimization experiments")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train a policy population")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out", help="output directory (overrides output_dir)")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--workers", type=int, help="rollout threads (overrides rollout_workers)")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, help="defaults to the checkpoint's eval_episodes")
    evaluate.add_argument("--seed", type=int, required=True)
    evaluate.add_argument("--perturb", type=float, default=1.0, help="scale the task's mass (and pendulum length)")
    evaluate.set_defaults(handler=cmd_eval)

    compare = sub.add_parser("compare", help="full vs. simple variant over several seeds")
    compare.add_argument("--config", required=True)
    compare.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2")
    compare.set_defaults(handler=cmd_compare)

    plot = sub.add_parser("plot", help="render metrics.csv as an SVG training curve")
    plot.add_argument("--csv", required=True)
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ArgumentError as exc:
        sys.stderr.write(f"cgrpo: {exc.detail}\n")
        return exc.exit_code
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except DivergenceError as exc:
        logger.error("diverged: %s", exc.detail)
        for key, value in exc.diagnostics.items():
            logger.error("  %s = %s", key, value)
        return exc.exit_code
    except GrpoError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.detail)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
