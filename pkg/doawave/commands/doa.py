"""
doawave — DOA Command
"""

from pathlib import Path

from commands.options import add_common_options, resolve_config
from models import DoaMethod, Stage
from services.pipeline import RunPaths, run_pipeline

ESTIMATORS = [m.value for m in DoaMethod if m != DoaMethod.ORACLE]


def register(subparsers):
    parser = subparsers.add_parser("doa", help="estimate DOAs for every mixture in a dataset manifest")
    add_common_options(parser, out_help="DOA CSV path (default: <run dir>/doa.csv)")
    parser.add_argument("--method", nargs="+", choices=ESTIMATORS, help="spatial spectrum method(s)")
    parser.add_argument("--gamma", nargs="+", type=float, help="angle resolution(s) in degrees")
    parser.add_argument("--manifest", help="dataset.jsonl (default: <run dir>/dataset.jsonl)")
    parser.add_argument("--spectrum-svg", help="directory for polar spectrum plots")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args, {
        "doa.methods": args.method,
        "doa.gammas": args.gamma,
        "doa.spectrum_svg_dir": str(Path(args.spectrum_svg).resolve()) if args.spectrum_svg else None,
    }, out_is_run_dir=False)
    run_dir = Path(args.manifest).parent if args.manifest else Path(cfg.out_dir)
    paths = RunPaths.under(run_dir, dataset=args.manifest, doa_csv=args.out)
    return run_pipeline(cfg, paths, stages=[Stage.DOA]).exit_code
