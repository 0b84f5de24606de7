"""
doawave — Configuration Loader
TOML experiment files, command-line overrides and the DOAWAVE_JOBS fallback,
validated into an ExperimentConfig.
"""

import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from errors import ConfigError
from models import ExperimentConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

JOBS_ENV = "DOAWAVE_JOBS"
DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "data" / "default_config.toml"


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Set dotted keys ("separation.kappa") on a nested dict; None values are skipped."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = doc
        for key in parents:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
            node[key] = child = dict(child)
            node = child
        node[leaf] = value
    return doc


def _env_jobs():
    raw = os.environ.get(JOBS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        jobs = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{JOBS_ENV}={raw!r} is not an integer") from exc
    if jobs < 1:
        raise ConfigError(f"{JOBS_ENV} must be at least 1, got {jobs}")
    return jobs


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File values, then explicit overrides (flags always win).

    DOAWAVE_JOBS only fills in `jobs` when neither the file nor the flags set it.
    """
    doc = read_toml(path) if path is not None else {}
    overrides = dict(overrides or {})
    if overrides.get("jobs") is None and "jobs" not in doc:
        env_jobs = _env_jobs()
        if env_jobs is not None:
            overrides["jobs"] = env_jobs
    doc = apply_overrides(doc, overrides)

    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from exc

    if cfg.paper_ranges:
        violations = cfg.simulation.paper_range_violations()
        if violations:
            raise ConfigError(f"--paper-ranges: outside the published ranges: {', '.join(violations)}")
    logger.debug("configuration loaded (seed=%d, jobs=%d)", cfg.seed, cfg.jobs)
    return cfg
