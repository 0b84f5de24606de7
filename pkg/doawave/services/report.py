"""
doawave — Report Service
CSV writers for the per-utterance rows and the aggregated method x metric
summary (CSV plus aligned plain text).
"""

import csv
import logging
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)

SCIENTIFIC_FIELDS = {"analytic", "finite_difference", "relative_error", "initial_loss", "final_loss"}
GRADIENT_TOLERANCE = 1e-4
DESCENT_SUCCESS_DEG = 2.0


class ReportRow(BaseModel):
    section: str
    key: str
    metric: str
    value: float
    count: int


def format_value(name: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return f"{value:.9e}" if name in SCIENTIFIC_FIELDS else f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return ";".join(format_value(name, v) for v in value)
    return str(value)


def write_rows(path, rows: list[BaseModel], model: type[BaseModel]) -> Path:
    """One CSV line per row, columns in model field order, fixed float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(model.model_fields)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([format_value(f, getattr(row, f)) for f in fields])
    logger.info("wrote %d rows to %s", len(rows), path)
    return path


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _grouped(rows: list[dict], key_fn) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(key_fn(row), []).append(row)
    return groups


def _mean(rows, field) -> float:
    return float(np.mean([float(r[field]) for r in rows]))


def _doa_section(rows: list[dict]) -> list[ReportRow]:
    out = []
    for key, group in _grouped(rows, lambda r: f"{r['method']}/{r['estimator']}/gamma={float(r['gamma']):g}").items():
        out.append(ReportRow(section="doa", key=key, metric="mean_error_deg",
                             value=_mean(group, "mean_error_deg"), count=len(group)))
        entropies = [r for r in group if r["posterior_entropy_bits"]]
        if entropies:
            out.append(ReportRow(section="doa", key=key, metric="posterior_entropy_bits",
                                 value=_mean(entropies, "posterior_entropy_bits"), count=len(entropies)))
        fallbacks = sum(r["fallback"] == "true" for r in group)
        out.append(ReportRow(section="doa", key=key, metric="peak_fallback_rate",
                             value=fallbacks / len(group), count=len(group)))
    return out


def _separation_section(rows: list[dict], ref_channel: int) -> list[ReportRow]:
    out = []
    for kind, group in _grouped(rows, lambda r: r["reference_kind"]).items():
        baseline = {(r["utterance_id"], r["source"]): float(r["mixture_si_sdr_db"]) for r in group}
        out.append(ReportRow(section="separation", key=f"input mixture (ch{ref_channel}, {kind})",
                             metric="mean_si_sdr_db", value=float(np.mean(list(baseline.values()))),
                             count=len(baseline)))
    for key, group in _grouped(rows, lambda r: f"{r['beamformer']}/{r['doa']}/{r['mask']}/{r['reference_kind']}").items():
        out.append(ReportRow(section="separation", key=key, metric="mean_si_sdr_db",
                             value=_mean(group, "si_sdr_db"), count=len(group)))
        out.append(ReportRow(section="separation", key=key, metric="mean_improvement_db",
                             value=_mean(group, "improvement_db"), count=len(group)))
    return out


def _gradcheck_section(rows: list[dict], descent: list[dict]) -> list[ReportRow]:
    out = []
    if rows:
        clean = [r for r in rows if r["kink"] != "true"]
        if clean:
            agree = sum(float(r["relative_error"]) <= GRADIENT_TOLERANCE for r in clean)
            out.append(ReportRow(section="gradcheck", key="analytic_vs_fd", metric="agreement_rate",
                                 value=agree / len(clean), count=len(clean)))
            out.append(ReportRow(section="gradcheck", key="analytic_vs_fd", metric="median_relative_error",
                                 value=float(np.median([float(r["relative_error"]) for r in clean])),
                                 count=len(clean)))
        out.append(ReportRow(section="gradcheck", key="analytic_vs_fd", metric="kink_flagged",
                             value=float(len(rows) - len(clean)), count=len(rows)))
    if descent:
        ok = sum(float(r["final_error_deg"]) < DESCENT_SUCCESS_DEG for r in descent)
        out.append(ReportRow(section="gradcheck", key="descent", metric="success_rate",
                             value=ok / len(descent), count=len(descent)))
        out.append(ReportRow(section="gradcheck", key="descent", metric="mean_final_error_deg",
                             value=_mean(descent, "final_error_deg"), count=len(descent)))
    return out


def build_report(doa_csv=None, separation_csv=None, gradcheck_csv=None, descent_csv=None,
                 failures: dict[str, int] | None = None, ref_channel: int = 1) -> list[ReportRow]:
    """Aggregate whichever stage CSVs exist; rows keep first-appearance order."""
    rows: list[ReportRow] = []
    if doa_csv is not None:
        rows += _doa_section(read_rows(doa_csv))
    if separation_csv is not None:
        rows += _separation_section(read_rows(separation_csv), ref_channel)
    rows += _gradcheck_section(
        read_rows(gradcheck_csv) if gradcheck_csv is not None else [],
        read_rows(descent_csv) if descent_csv is not None else [],
    )
    for stage, count in sorted((failures or {}).items()):
        rows.append(ReportRow(section="failures", key=stage, metric="failed_items",
                              value=float(count), count=count))
    return rows


def render_text(rows: list[ReportRow]) -> str:
    header = ["section", "key", "metric", "value", "n"]
    table = [header] + [[r.section, r.key, r.metric, format_value("value", r.value), str(r.count)] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    lines = []
    for i, line in enumerate(table):
        cells = [c.ljust(w) if j < 3 else c.rjust(w) for j, (c, w) in enumerate(zip(line, widths))]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(rows: list[ReportRow], csv_path, text_path) -> str:
    write_rows(csv_path, rows, ReportRow)
    text = render_text(rows)
    Path(text_path).write_text(text, encoding="utf-8")
    return text
