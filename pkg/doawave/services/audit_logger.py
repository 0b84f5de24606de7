"""
doawave — Audit Logger
Per-utterance trail of pipeline actions with timings. Entries carry wall-clock
time and are never written to the CSV reports.

With a run directory bound, audit.jsonl is the only store and trails are read
back from it; otherwise entries are kept in memory.
"""

import json
import time
import uuid
from datetime import datetime, timezone
from pathlib import Path


# Unbound store: utterance_id -> list[entry]
_audit_store: dict[str, list[dict]] = {}
_sink: Path | None = None


def bind_run_dir(run_dir) -> Path:
    """Send every entry to <run_dir>/audit.jsonl instead of memory."""
    global _sink
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    _sink = path / "audit.jsonl"
    return _sink


def unbind_run_dir():
    global _sink
    _sink = None


def log_action(utterance_id: str, action: str, module: str,
               input_summary: str, output_summary: str,
               duration_ms: int = 0) -> dict:
    """Log an audit entry for one utterance."""
    entry = {
        "entry_id": f"AUD-{uuid.uuid4().hex[:8].upper()}",
        "utterance_id": utterance_id,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "action": action,
        "module": module,
        "input_summary": input_summary,
        "output_summary": output_summary,
        "duration_ms": duration_ms,
    }
    if _sink is None:
        _audit_store.setdefault(utterance_id, []).append(entry)
    else:
        with _sink.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")
    return entry


def _sink_entries(utterance_id: str) -> list[dict]:
    if _sink is None or not _sink.exists():
        return []
    entries = []
    with _sink.open(encoding="utf-8") as fh:
        for line in fh:
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                continue  # torn tail
            if entry.get("utterance_id") == utterance_id:
                entries.append(entry)
    return entries


def get_audit_trail(utterance_id: str) -> dict:
    entries = _sink_entries(utterance_id) if _sink is not None else _audit_store.get(utterance_id, [])
    return {
        "utterance_id": utterance_id,
        "entries": entries,
        "total_duration_ms": sum(e.get("duration_ms", 0) for e in entries),
    }


def clear_audit(utterance_id: str | None = None):
    """Forget in-memory trails, one utterance or all; audit.jsonl is left alone."""
    if utterance_id is None:
        _audit_store.clear()
    else:
        _audit_store.pop(utterance_id, None)


class AuditContext:
    """Times a block of work and logs it; failures are logged with the error."""

    def __init__(self, utterance_id: str, action: str, module: str, input_summary: str):
        self.utterance_id = utterance_id
        self.action = action
        self.module = module
        self.input_summary = input_summary
        self.output_summary = "completed"
        self.start_time = None
        self.entry = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        duration_ms = int((time.perf_counter() - self.start_time) * 1000)
        output = f"error: {exc_val}" if exc_type else self.output_summary
        self.entry = log_action(
            self.utterance_id, self.action, self.module,
            self.input_summary, output,
            duration_ms=duration_ms,
        )
        return False

    def set_output(self, output_summary: str):
        self.output_summary = output_summary
