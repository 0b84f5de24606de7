"""
doawave — Shared Command Options
Flags every subcommand accepts and the config they resolve to.
"""

from models import ExperimentConfig
from services.config_loader import load_config


def add_common_options(parser, out_help: str = "run directory"):
    parser.add_argument("--config", help="experiment TOML file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--jobs", type=int, help="worker processes (default: config file, else $DOAWAVE_JOBS)")
    parser.add_argument("--paper-ranges", action="store_true", default=None,
                        help="check simulation ranges against the published setup")
    parser.add_argument("--out", help=out_help)


def resolve_config(args, overrides: dict | None = None, out_is_run_dir: bool = True) -> ExperimentConfig:
    """Config file, then DOAWAVE_JOBS, then flags."""
    merged = {
        "seed": args.seed,
        "jobs": args.jobs,
        "paper_ranges": args.paper_ranges,
        "out_dir": args.out if out_is_run_dir else None,
    }
    merged.update(overrides or {})
    return load_config(args.config, merged)
