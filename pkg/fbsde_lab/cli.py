"""Command-line front end: ``python -m fbsde_lab <command> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import console
from .errors import ConfigInvalidError, FBSDEError
from .experiments import COMMANDS, FAILURE, ExperimentConfig
from .settings import get_settings

logger = logging.getLogger("fbsde_lab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsde_lab",
                                     description="Coupled FBSDE well-posedness laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="experiment config (JSON)")
        cmd.add_argument("--out", default=None, help="output directory (overrides the config)")
        cmd.add_argument("--seed", type=int, default=None, help="Monte Carlo and sampling seed")
        cmd.add_argument("--threads", type=int, default=None, help="worker threads")
        cmd.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
        if name == "converge":
            cmd.add_argument("--levels", type=int, default=None)
        if name == "stability":
            cmd.add_argument("--epsilons", type=float, nargs="+", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
        console.setup_logging((args.log_level or settings.log_level).upper())
        config = ExperimentConfig.from_file(args.config).with_overrides(
            seed=args.seed, threads=args.threads, out=args.out)
        if args.command == "converge":
            return COMMANDS["converge"](config, args.levels)
        if args.command == "stability":
            return COMMANDS["stability"](config, args.epsilons)
        return COMMANDS[args.command](config)
    except ConfigInvalidError as exc:
        console.fail(f"config invalid: {exc}")
        return FAILURE
    except (FBSDEError, ValueError) as exc:
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        console.fail(f"{type(exc).__name__}: {exc}")
        return FAILURE
    except (OSError, RuntimeError, ArithmeticError, LookupError) as exc:
        # I/O and numeric failures outside the FBSDEError family
        logger.exception("%s aborted", args.command)
        console.fail(f"{type(exc).__name__}: {exc}")
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
