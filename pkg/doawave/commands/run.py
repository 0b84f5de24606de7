"""
doawave — Run Command
Every configured stage in order, resuming finished work.
"""

from commands.options import add_common_options, resolve_config
from models import Stage
from services.pipeline import RunPaths, run_pipeline


def register(subparsers):
    parser = subparsers.add_parser("run", help="run the configured stages end to end")
    add_common_options(parser)
    parser.add_argument("--stages", nargs="+", choices=[s.value for s in Stage])
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args, {"stages": args.stages})
    result = run_pipeline(cfg, RunPaths.under(cfg.out_dir))
    if result.report_text:
        print(result.report_text, end="")
    return result.exit_code
