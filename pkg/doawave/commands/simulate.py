"""
doawave — Simulate Command
"""

from commands.options import add_common_options, resolve_config
from models import Stage
from services.pipeline import RunPaths, run_pipeline


def register(subparsers):
    parser = subparsers.add_parser("simulate", help="generate reverberant mixtures and dataset.jsonl")
    add_common_options(parser)
    parser.add_argument("--count", type=int, help="number of mixtures")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args, {"simulation.count": args.count})
    result = run_pipeline(cfg, RunPaths.under(cfg.out_dir), stages=[Stage.SIMULATE])
    return result.exit_code
