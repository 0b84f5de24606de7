"""
doawave — Command-Line Entry Point
Subcommands: simulate, doa, separate, gradcheck, report, run.
"""

import argparse
import logging
import sys

from commands import doa, gradcheck, report, run, separate, simulate
from errors import ConfigError

COMMANDS = (simulate, doa, separate, gradcheck, report, run)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doawave",
        description="Simulate circular-array mixtures, localize and separate the sources, score the results.",
    )
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
