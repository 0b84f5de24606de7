"""
doawave — Report Command
"""

from commands.options import add_common_options, resolve_config
from services.pipeline import RunPaths, assemble_report


def register(subparsers):
    parser = subparsers.add_parser("report", help="aggregate the stage CSVs of a run directory")
    add_common_options(parser)
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args)
    paths = RunPaths.under(cfg.out_dir)
    print(assemble_report(paths, cfg.separation.ref_channel), end="")
    return 0
