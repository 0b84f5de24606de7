"""
doawave — Gradient Check Command
"""

from pathlib import Path

from commands.options import add_common_options, resolve_config
from models import BeamformerKind, Stage
from services.pipeline import RunPaths, run_pipeline


def register(subparsers):
    parser = subparsers.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    add_common_options(parser)
    parser.add_argument("--scenarios", type=int, help="number of simulated scenes")
    parser.add_argument("--draws", type=int, help="angle draws per scene")
    parser.add_argument("--beamformer", choices=[k.value for k in BeamformerKind])
    parser.add_argument("--report", help="gradient CSV path (default: <run dir>/gradcheck.csv)")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args, {
        "gradcheck.scenarios": args.scenarios,
        "gradcheck.draws": args.draws,
        "gradcheck.beamformer": args.beamformer,
    })
    report = Path(args.report) if args.report else None
    paths = RunPaths.under(cfg.out_dir, gradcheck_csv=report,
                           descent_csv=report.with_name(f"{report.stem}_descent.csv") if report else None)
    return run_pipeline(cfg, paths, stages=[Stage.GRADCHECK]).exit_code
