"""Command line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import EflError
from .stages import STAGE_COMMANDS, STAGE_ORDER

log = logging.getLogger("efl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efl",
        description="Egocentric action-frame generation: staged pipeline from "
        "corpus synthesis through evaluation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGE_ORDER:
        doc = (STAGE_COMMANDS[stage].__doc__ or "").strip().splitlines()
        sp = sub.add_parser(stage, help=doc[0] if doc else None)
        sp.add_argument("--config", required=True, help="path to the key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config key (repeatable)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = load_config(args.config, overrides)
        STAGE_COMMANDS[args.stage](config)
    except EflError as err:
        log.error("%s", err)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
