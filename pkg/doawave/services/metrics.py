"""
doawave — Metrics Service
Cyclic DOA error with permutation matching, SI-SDR and the per-utterance
separation report.
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal

from errors import MetricError
from models import ReferenceKind
from services.beamform import REF_CHANNEL
from services.signals import Waveform
from services.simulate import MixtureRecord

logger = logging.getLogger(__name__)

SDR_CAP_DB = 60.0
MAX_ALIGN_LAG = 4096


@dataclass(frozen=True)
class DoaErrorEntry:
    permutation: tuple[int, ...]  # permutation[n] = prediction matched to truth n
    errors_deg: tuple[float, ...]
    mean_error_deg: float


@dataclass(frozen=True)
class SdrReport:
    assignment: tuple[int, ...]  # assignment[n] = estimate matched to reference n
    si_sdr_db: tuple[float, ...]
    mixture_si_sdr_db: tuple[float, ...]
    lags: tuple[int, ...] = ()

    @property
    def improvement_db(self) -> tuple[float, ...]:
        return tuple(e - m for e, m in zip(self.si_sdr_db, self.mixture_si_sdr_db))

    @property
    def mean_si_sdr_db(self) -> float:
        return float(np.mean(self.si_sdr_db))

    @property
    def mean_improvement_db(self) -> float:
        return float(np.mean(self.improvement_db))


# ── DOA ─────────────────────────────────────────────────────────────


def cyclic_error_deg(pred, truth):
    """min(|d|, 360 - |d|) in degrees for angles given in radians."""
    d = np.abs(np.degrees(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))) % 360.0
    err = np.minimum(d, 360.0 - d)
    return float(err) if err.ndim == 0 else err


def permutation_min_doa_error(preds, truths) -> DoaErrorEntry:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise MetricError(f"{preds.size} predictions for {truths.size} sources")

    best = None
    for perm in itertools.permutations(range(truths.size)):
        errors = cyclic_error_deg(preds[list(perm)], truths)
        mean = float(np.mean(errors))
        if best is None or mean < best.mean_error_deg:
            best = DoaErrorEntry(tuple(perm), tuple(float(e) for e in errors), mean)
    return best


def mean_doa_error(entries: list[DoaErrorEntry]) -> float:
    if not entries:
        raise MetricError("no DOA entries to aggregate")
    return float(np.mean([e.mean_error_deg for e in entries]))


# ── SI-SDR ──────────────────────────────────────────────────────────


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(est, ref) -> float:
    """10 log10(||a s||^2 / ||a s - x||^2), a = <x, s> / ||s||^2, clamped to +/-60 dB."""
    x, s = _samples(est), _samples(ref)
    n = min(x.shape[0], s.shape[0])
    x, s = x[:n], s[:n]

    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise MetricError("reference signal is silent")
    if not np.any(x):
        return -SDR_CAP_DB

    target = (np.dot(x, s) / ref_energy) * s
    residual = float(np.sum((target - x) ** 2))
    target_energy = float(np.dot(target, target))
    if residual == 0.0:
        return SDR_CAP_DB
    if target_energy == 0.0:
        return -SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_energy / residual), -SDR_CAP_DB, SDR_CAP_DB))


def alignment_lag(est, ref, max_lag: int = MAX_ALIGN_LAG) -> int:
    """Integer lag (samples) by which ref must be delayed to best match est."""
    x, s = _samples(est), _samples(ref)
    corr = signal.correlate(x, s, mode="full", method="fft")
    lags = signal.correlation_lags(x.shape[0], s.shape[0], mode="full")
    window = np.abs(lags) <= max_lag
    return int(lags[window][np.argmax(corr[window])])


def shift(x: np.ndarray, lag: int) -> np.ndarray:
    """Delay by lag samples (advance when negative), zero-filled, same length."""
    out = np.zeros_like(x)
    if abs(lag) >= x.shape[0]:
        return out
    if lag >= 0:
        out[lag:] = x[:x.shape[0] - lag]
    else:
        out[:lag] = x[-lag:]
    return out


def separation_report(estimates: list[Waveform], record: MixtureRecord,
                      reference_kind: ReferenceKind = ReferenceKind.IMAGE,
                      ref_channel: int = REF_CHANNEL) -> SdrReport:
    """Permutation-min assignment of estimates to references by total SI-SDR,
    with the reference-channel mixture as the baseline."""
    n_src = len(record.references)
    if len(estimates) != n_src:
        raise MetricError(f"{len(estimates)} estimates for {n_src} sources")
    length = record.mixture.n_samples
    for est in estimates:
        if len(est) != length:
            raise MetricError(f"estimate has {len(est)} samples, mixture has {length}")

    if reference_kind == ReferenceKind.IMAGE:
        refs = [r.channels[ref_channel] for r in record.references]
    else:
        refs = [w.samples for w in record.dry]
    mixture = record.mixture.channels[ref_channel]

    def aligned(est, ref):
        if reference_kind == ReferenceKind.IMAGE:
            return ref, 0
        lag = alignment_lag(est, ref)
        return shift(ref, lag), lag

    scores = np.zeros((n_src, n_src))
    lags = np.zeros((n_src, n_src), dtype=int)
    for n, ref in enumerate(refs):
        for k, est in enumerate(estimates):
            r, lags[n, k] = aligned(est.samples, ref)
            scores[n, k] = si_sdr(est.samples, r)

    best = max(itertools.permutations(range(n_src)),
               key=lambda p: sum(scores[n, p[n]] for n in range(n_src)))
    baseline = []
    for ref in refs:
        r, _ = aligned(mixture, ref)
        baseline.append(si_sdr(mixture, r))

    return SdrReport(
        assignment=tuple(best),
        si_sdr_db=tuple(float(scores[n, best[n]]) for n in range(n_src)),
        mixture_si_sdr_db=tuple(float(b) for b in baseline),
        lags=tuple(int(lags[n, best[n]]) for n in range(n_src)),
    )
