"""
doawave — Separate Command
"""

from pathlib import Path

from commands.options import add_common_options, resolve_config
from models import BeamformerKind, DoaMethod, MaskSource, ReferenceKind, Stage
from services.pipeline import RunPaths, run_pipeline


def register(subparsers):
    parser = subparsers.add_parser("separate", help="beamform every mixture and score the outputs")
    add_common_options(parser, out_help="directory for separated WAVs and separation.csv")
    parser.add_argument("--beamformer", nargs="+", choices=[k.value for k in BeamformerKind])
    parser.add_argument("--doa", nargs="+", choices=[m.value for m in DoaMethod],
                        help="DOA source(s); 'oracle' uses the true directions")
    parser.add_argument("--mask", nargs="+", choices=[m.value for m in MaskSource])
    parser.add_argument("--kappa", type=float, help="mask sparsity constant in [0, 1)")
    parser.add_argument("--ref-channel", type=int, help="zero-based reference microphone")
    parser.add_argument("--reference", choices=[k.value for k in ReferenceKind],
                        help="score against reverberant images or dry signals")
    parser.add_argument("--manifest", help="dataset.jsonl (default: <run dir>/dataset.jsonl)")
    plots = parser.add_mutually_exclusive_group()
    plots.add_argument("--mask-png", dest="mask_plot", action="store_const", const="png")
    plots.add_argument("--mask-svg", dest="mask_plot", action="store_const", const="svg")
    parser.add_argument("--no-wavs", action="store_true", help="do not write separated WAVs")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    cfg = resolve_config(args, {
        "separation.beamformers": args.beamformer,
        "separation.doa_sources": args.doa,
        "separation.masks": args.mask,
        "separation.kappa": args.kappa,
        "separation.ref_channel": args.ref_channel,
        "separation.reference_kind": args.reference,
        "separation.mask_plot_format": args.mask_plot,
        "separation.write_wavs": False if args.no_wavs else None,
    }, out_is_run_dir=False)
    run_dir = Path(args.manifest).parent if args.manifest else Path(cfg.out_dir)
    out = Path(args.out) if args.out else None
    paths = RunPaths.under(run_dir, dataset=args.manifest, separated_dir=out,
                           separation_csv=out / "separation.csv" if out else None)
    return run_pipeline(cfg, paths, stages=[Stage.SEPARATE]).exit_code
