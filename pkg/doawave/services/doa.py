"""
doawave — Direction-of-Arrival Service
Angle discretization, posterior-weighted DOA interpolation, a steered-response
power front-end and the MUSIC / TOPS subspace baselines with peak picking.

The posterior logits come from a classical spatial spectrum rather than a
trained network; the discretization, softmax posterior and weighted-sum
estimate are otherwise unchanged.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import DoaError, GridError
from models import DoaConfig, DoaMethod, TopsReference, UcaGeometry
from services.beamform import input_scm, load_diagonal
from services.geometry import delays_grid, steering_tensor
from services.signals import MultichannelSpectrogram

logger = logging.getLogger(__name__)

PHAT_EPS = 1e-8


@dataclass(frozen=True)
class AngularGrid:
    gamma_deg: float
    classes: np.ndarray  # radians, class i at index i - 1

    @property
    def size(self) -> int:
        return self.classes.shape[0]

    @property
    def classes_deg(self) -> np.ndarray:
        return np.degrees(self.classes)


@dataclass(frozen=True)
class DoaPosterior:
    probs: np.ndarray  # (N, K)


@dataclass(frozen=True)
class DoaEstimate:
    thetas: np.ndarray
    method: Optional[DoaMethod]
    class_indices: tuple[int, ...] = ()
    fallback: bool = False
    interpolated: bool = False

    @property
    def thetas_deg(self) -> np.ndarray:
        return np.degrees(self.thetas)


@dataclass(frozen=True)
class SpatialSpectrum:
    grid: AngularGrid
    scores: np.ndarray
    method: DoaMethod = DoaMethod.SRP
    meta: dict = field(default_factory=dict)


def angular_grid(gamma_deg: float) -> AngularGrid:
    """alpha_i = (gamma * i - (gamma - 1) / 2) * pi / 180, i = 1 .. floor(360 / gamma)."""
    if gamma_deg <= 0:
        raise GridError(f"angle resolution must be positive, got {gamma_deg}")
    if not (1 <= gamma_deg <= 120):
        raise GridError(f"angle resolution {gamma_deg} outside [1, 120] degrees")
    i = np.arange(1, int(math.floor(360.0 / gamma_deg)) + 1, dtype=np.float64)
    classes = (gamma_deg * i - (gamma_deg - 1.0) / 2.0) * (math.pi / 180.0)
    return AngularGrid(float(gamma_deg), classes)


def cyclic_distance_deg(a_rad, b_rad) -> np.ndarray:
    d = np.abs(np.degrees(np.asarray(a_rad) - np.asarray(b_rad))) % 360.0
    return np.minimum(d, 360.0 - d)


# ── Posterior machinery ─────────────────────────────────────────────


def expected_doa(posterior: DoaPosterior, grid: AngularGrid, circular: bool = False,
                 method: DoaMethod = DoaMethod.SRP, anchors=None) -> DoaEstimate:
    """Posterior-weighted angle per source.

    The default is the plain weighted sum of class angles. With `anchors`
    (one angle per source, usually the picked peaks) each class is first moved
    onto the anchor's branch, theta - 2pi round((theta - anchor) / 2pi), so a
    window straddling 0/360 degrees averages neighbouring angles; the result is
    reduced mod 2pi. `circular=True` takes the argument of the weighted phasor
    sum instead.
    """
    probs = np.asarray(posterior.probs, dtype=np.float64)
    classes = grid.classes
    if circular:
        thetas = np.mod(np.angle(probs @ np.exp(1j * classes)), 2 * math.pi)
    elif anchors is None:
        thetas = probs @ classes
    else:
        anchors = np.asarray(anchors, dtype=np.float64)[:, None]
        unwrapped = classes[None, :] - 2 * math.pi * np.round((classes[None, :] - anchors) / (2 * math.pi))
        thetas = np.mod((probs * unwrapped).sum(axis=1), 2 * math.pi)
    return DoaEstimate(thetas, method, interpolated=True)


def posterior_from_spectrum(spectrum: SpatialSpectrum, peaks: DoaEstimate,
                            window_deg: float = 20.0, temperature: float = 0.05) -> DoaPosterior:
    """Softmax over the spectrum restricted to +/- window_deg around each peak.

    Scores are divided by the global maximum before the temperature so that
    the temperature is independent of the input level.
    """
    scores = np.asarray(spectrum.scores, dtype=np.float64)
    top = scores.max()
    scaled = scores / top if top > 0 else np.zeros_like(scores)
    classes = spectrum.grid.classes

    probs = []
    for idx in peaks.class_indices:
        inside = cyclic_distance_deg(classes, classes[idx]) <= window_deg
        logits = np.where(inside, scaled / temperature, -np.inf)
        weights = np.exp(logits - logits[inside].max())
        probs.append(weights / weights.sum())
    return DoaPosterior(np.array(probs))


def posterior_entropy_bits(posterior: DoaPosterior) -> float:
    p = posterior.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return float(terms.sum(axis=1).mean())


# ── Spatial spectra ─────────────────────────────────────────────────


def _band_bins(spec: MultichannelSpectrogram, band_hz) -> np.ndarray:
    freqs = spec.freqs
    keep = freqs > 0
    if band_hz is not None:
        keep &= (freqs >= band_hz[0]) & (freqs <= band_hz[1])
    return np.flatnonzero(keep)


def _check_input(spec: MultichannelSpectrogram, n_sources: int | None = None):
    if spec.data.size == 0 or spec.n_frames == 0:
        raise DoaError("empty spectrogram")
    if spec.n_channels < 2:
        raise DoaError("spatial spectra need at least two channels")
    if n_sources is not None and not (1 <= n_sources < spec.n_channels):
        raise DoaError(f"need 1 <= n_sources < M, got {n_sources} with M={spec.n_channels}")


def srp_spectrum(spec: MultichannelSpectrogram, geom: UcaGeometry, grid: AngularGrid,
                 band_hz=None, eps: float = PHAT_EPS) -> SpatialSpectrum:
    """score(alpha) = sum_{t,f} |d(alpha, f)^H y_hat(t, f)|^2 with y_hat = y / (||y|| + eps)."""
    _check_input(spec)
    bins = _band_bins(spec, band_hz)
    if bins.size == 0:
        raise DoaError(f"no frequency bins inside band {band_hz}")

    y = spec.data[:, :, bins]
    y_hat = y / (np.linalg.norm(y, axis=1, keepdims=True) + eps)
    r = np.einsum("tmf,tnf->fmn", y_hat, np.conj(y_hat))
    d = steering_tensor(geom, grid.classes, spec.freqs[bins])  # (F, M, K)
    scores = np.real(np.einsum("fmk,fmn,fnk->k", np.conj(d), r, d))
    return SpatialSpectrum(grid, np.maximum(scores, 0.0), DoaMethod.SRP)


def _subspaces(spec: MultichannelSpectrogram, bins: np.ndarray, n_sources: int):
    """Eigen-decomposition of the loaded input SCM at the chosen bins.

    Returns (signal subspace (F, M, n), noise subspace (F, M, M - n)).
    """
    phi = load_diagonal(input_scm(spec).matrices[bins])
    _, vecs = np.linalg.eigh(phi)  # ascending eigenvalues
    m = spec.n_channels
    return vecs[:, :, m - n_sources:], vecs[:, :, :m - n_sources]


def music_spectrum(spec: MultichannelSpectrogram, geom: UcaGeometry, grid: AngularGrid,
                   n_sources: int, band_hz=(300.0, 4000.0), normalize: bool = False) -> SpatialSpectrum:
    """Incoherent average of narrowband MUSIC pseudo-spectra 1 / ||E_n^H d||^2."""
    _check_input(spec, n_sources)
    bins = _band_bins(spec, band_hz)
    if bins.size == 0:
        raise DoaError(f"no frequency bins inside band {band_hz}")

    _, noise = _subspaces(spec, bins, n_sources)
    d = steering_tensor(geom, grid.classes, spec.freqs[bins])
    proj = np.einsum("fme,fmk->fek", np.conj(noise), d)
    denom = np.sum(np.abs(proj) ** 2, axis=1)
    pseudo = 1.0 / np.maximum(denom, np.finfo(np.float64).tiny)
    if normalize:
        pseudo = pseudo / pseudo.max(axis=1, keepdims=True)
    return SpatialSpectrum(grid, pseudo.mean(axis=0), DoaMethod.MUSIC)


def tops_spectrum(spec: MultichannelSpectrogram, geom: UcaGeometry, grid: AngularGrid,
                  n_sources: int, band_hz=(300.0, 4000.0),
                  reference: TopsReference = TopsReference.BAND_CENTER) -> SpatialSpectrum:
    """Test of orthogonality of projected subspaces.

    The signal subspace at a reference bin is carried to every other bin by the
    candidate direction's phase shift and tested against that bin's noise
    subspace; the score is the inverse smallest singular value.
    """
    _check_input(spec, n_sources)
    bins = _band_bins(spec, band_hz)
    if bins.size < 2:
        raise DoaError("TOPS needs at least two frequency bins in band")
    if spec.n_frames < spec.n_channels:
        raise DoaError(f"TOPS needs at least {spec.n_channels} frames, got {spec.n_frames}")

    if reference == TopsReference.MAX_POWER:
        ref_pos = int(np.argmax(np.abs(spec.data[:, :, bins]).sum(axis=(0, 1))))
    else:
        ref_pos = bins.size // 2

    signal_sub, noise_sub = _subspaces(spec, bins, n_sources)
    f0 = spec.freqs[bins[ref_pos]]
    others = np.delete(np.arange(bins.size), ref_pos)

    offsets = spec.freqs[bins[others]] - f0
    shift = np.exp(2j * np.pi * offsets[:, None, None] * delays_grid(geom, grid.classes)[None])  # (F', M, K)
    # U_i(theta) = (diag(shift_i(theta)) F_0)^H, then U_i W_i for every bin and candidate
    carried = shift[:, :, :, None] * signal_sub[ref_pos][None, :, None, :]      # (F', M, K, n)
    blocks = np.einsum("fmks,fme->ksfe", np.conj(carried), noise_sub[others])   # (K, n, F', M-n)
    d_mat = blocks.reshape(grid.size, n_sources, -1)
    sv = np.linalg.svd(d_mat, compute_uv=False)
    smallest = np.maximum(sv[:, -1], 1e-15 * sv[:, 0])
    return SpatialSpectrum(grid, 1.0 / smallest, DoaMethod.TOPS, {"reference_hz": float(f0)})


def spatial_spectrum(spec: MultichannelSpectrogram, geom: UcaGeometry, method: DoaMethod,
                     grid: AngularGrid, n_sources: int, cfg: DoaConfig = DoaConfig()) -> SpatialSpectrum:
    if method == DoaMethod.SRP:
        return srp_spectrum(spec, geom, grid, cfg.srp_band_hz)
    if method == DoaMethod.MUSIC:
        return music_spectrum(spec, geom, grid, n_sources, cfg.band_hz, cfg.music_normalize)
    if method == DoaMethod.TOPS:
        return tops_spectrum(spec, geom, grid, n_sources, cfg.band_hz, cfg.tops_reference)
    raise DoaError(f"no spatial spectrum for method '{method.value}'")


# ── Peak picking ────────────────────────────────────────────────────


def _ranked(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending score, lowest class index first on ties."""
    return candidates[np.lexsort((candidates, -scores[candidates]))]


def pick_peaks(spectrum: SpatialSpectrum, n_sources: int, min_separation_deg: float = 10.0) -> DoaEstimate:
    """Greedy choice of cyclic local maxima outside each chosen peak's exclusion zone."""
    if n_sources < 1:
        raise DoaError("need at least one source")
    scores = np.asarray(spectrum.scores, dtype=np.float64)
    classes = spectrum.grid.classes
    local = (scores >= np.roll(scores, 1)) & (scores >= np.roll(scores, -1))

    chosen: list[int] = []

    def take(order, respect_gap=True):
        for idx in order:
            if len(chosen) == n_sources:
                return
            if idx in chosen:
                continue
            if respect_gap and any(
                cyclic_distance_deg(classes[idx], classes[c]) < min_separation_deg for c in chosen
            ):
                continue
            chosen.append(int(idx))

    take(_ranked(scores, np.flatnonzero(local)))
    fallback = len(chosen) < n_sources
    if fallback:
        logger.warning("only %d of %d peaks found among local maxima; filling from global ranking",
                       len(chosen), n_sources)
        everything = _ranked(scores, np.arange(scores.size))
        take(everything)
        take(everything, respect_gap=False)

    return DoaEstimate(classes[chosen], spectrum.method, tuple(chosen), fallback=fallback)


def estimate_doa(spec: MultichannelSpectrogram, geom: UcaGeometry, method: DoaMethod,
                 gamma_deg: float, n_sources: int, cfg: DoaConfig = DoaConfig()):
    """Spectrum, peak estimate, posterior and posterior-interpolated estimate."""
    grid = angular_grid(gamma_deg)
    spectrum = spatial_spectrum(spec, geom, method, grid, n_sources, cfg)
    peaks = pick_peaks(spectrum, n_sources, cfg.min_separation_deg)
    posterior = posterior_from_spectrum(spectrum, peaks, cfg.posterior_window_deg, cfg.temperature)
    interp = expected_doa(posterior, grid, cfg.circular_mean, method, anchors=peaks.thetas)
    return spectrum, peaks, posterior, interp
