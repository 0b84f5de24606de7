"""
doawave — Run Manifest Service
Dataset manifest (dataset.jsonl) and the append-only stage-marker log
(run_manifest.jsonl) that makes reruns resume where they stopped.
"""

import logging
from pathlib import Path

from models import MixtureEntry, Stage, StageMarker, StageStatus

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.jsonl"
MARKER_FILE = "run_manifest.jsonl"


def write_dataset(path, entries: list[MixtureEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(e.model_dump_json() + "\n" for e in entries), encoding="utf-8")
    return path


def read_dataset(path) -> list[MixtureEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return [MixtureEntry.model_validate_json(line) for line in lines if line.strip()]


def append_marker(run_dir, marker: StageMarker) -> StageMarker:
    path = Path(run_dir) / MARKER_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(marker.model_dump_json() + "\n")
    return marker


def read_markers(run_dir) -> list[StageMarker]:
    path = Path(run_dir) / MARKER_FILE
    if not path.exists():
        return []
    markers = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            markers.append(StageMarker.model_validate_json(line))
        except ValueError:
            # a crash can leave a torn last line
            logger.warning("%s:%d unreadable marker skipped", path, lineno)
    return markers


def latest_status(run_dir) -> dict[tuple[str, Stage, str], StageStatus]:
    """Last status per (utterance, stage, fingerprint); a done marker is never downgraded."""
    status: dict[tuple[str, Stage, str], StageStatus] = {}
    for m in read_markers(run_dir):
        key = (m.utterance_id, m.stage, m.fingerprint)
        if status.get(key) == StageStatus.DONE:
            continue
        status[key] = m.status
    return status


def completed(run_dir, stage: Stage, fingerprint: str = "") -> set[str]:
    return {
        utt for (utt, st, fp), s in latest_status(run_dir).items()
        if st == stage and fp == fingerprint and s == StageStatus.DONE
    }


def failure_counts(run_dir) -> dict[str, int]:
    """Items whose most recent attempt at a stage failed, per stage."""
    last: dict[tuple[str, Stage], StageStatus] = {}
    for m in read_markers(run_dir):
        if m.status != StageStatus.STARTED:
            last[(m.utterance_id, m.stage)] = m.status
    counts: dict[str, int] = {}
    for (_, stage), s in last.items():
        if s == StageStatus.FAILED:
            counts[stage.value] = counts.get(stage.value, 0) + 1
    return counts
