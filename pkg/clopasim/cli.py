"""Command-line entry point: ``python -m clopasim.cli <command> --config ...``."""

import argparse
import asyncio
import json
import logging
import sys
import traceback
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from clopasim.commands import (
    MissingArtifactsError,
    cmd_calibrate,
    cmd_generate,
    cmd_gradcheck,
    cmd_pretrain,
    cmd_rank,
    cmd_report,
    cmd_run,
)
from clopasim.config import ConfigError, settings
from clopasim.experiment import ExperimentConfig
from clopasim.ledger import ComputeBudgetExceeded

logger = logging.getLogger("clopasim.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

_EXPERIMENT_COMMANDS = ("generate", "pretrain", "calibrate", "run", "report", "rank")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clopasim", description="Continual low-parameter adaptation simulator")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging (autodiff checks stay off)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _EXPERIMENT_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment YAML")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--threads", type=int, help="concurrent campaigns")
        p.add_argument("--out", type=Path, help="output directory")
        if name == "generate":
            p.add_argument("--preview", action="store_true", help="write PNG previews of every sample")

    p = sub.add_parser("gradcheck")
    p.add_argument("--cases", type=int, default=100, help="random cases per op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", action="append", dest="ops", help="limit to one op (repeatable)")
    return parser


async def _dispatch(args: argparse.Namespace) -> dict[str, Any]:
    if args.command == "gradcheck":
        return await cmd_gradcheck(args.cases, args.seed, args.ops)

    if args.out is not None:
        settings.OUT_DIR = str(args.out)
    if args.threads is not None:
        settings.THREADS = args.threads
    cfg = ExperimentConfig.load(args.config, seed=args.seed)
    settings.DEBUG = settings.DEBUG or cfg.debug

    if args.command == "generate":
        return await cmd_generate(cfg, preview=args.preview)
    if args.command == "pretrain":
        return await cmd_pretrain(cfg)
    if args.command == "calibrate":
        return await cmd_calibrate(cfg)
    if args.command == "run":
        return await cmd_run(cfg)
    if args.command == "report":
        return await cmd_report(cfg)
    if args.command == "rank":
        return await cmd_rank(cfg)
    raise ValueError(f"Unknown command: {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        result = asyncio.run(_dispatch(args))
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except MissingArtifactsError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except ComputeBudgetExceeded as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    except Exception as exc:
        logger.error("%s failed: %s\n%s", args.command, exc, traceback.format_exc())
        return EXIT_FAILURE

    print(json.dumps(result, indent=2, default=str))
    if args.command == "gradcheck" and not result["passed"]:
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
