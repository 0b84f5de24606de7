"""
doawave — Beamforming Service
Localization masks, spatial covariance estimation, LCMP / MVDR / MVDR-REF
beamformers, beamformer application and the ILM / IBM oracle masks.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import BeamformerError, MaskError
from models import BeamformerKind, UcaGeometry
from services.geometry import steering_tensor
from services.signals import MultichannelSpectrogram

logger = logging.getLogger(__name__)

DIAGONAL_LOADING = 1e-6
GRAM_CONDITION_LIMIT = 1e10
TRACE_FLOOR = 1e-12
REF_CHANNEL = 1  # second microphone


@dataclass(frozen=True)
class LocalizationMask:
    """Per-source real masks, shape (N, T, F)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise MaskError(f"mask must be (N, T, F), got shape {values.shape}")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise MaskError("mask values outside [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def n_sources(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SpatialCovariance:
    """Per-frequency Hermitian PSD matrices, shape (F, M, M)."""

    matrices: np.ndarray
    fallback_bins: int = 0


@dataclass(frozen=True)
class BeamformerWeights:
    """Per-source, per-frequency weights, shape (N, F, M)."""

    weights: np.ndarray
    kind: BeamformerKind
    degenerate_bins: int = 0

    @property
    def n_sources(self) -> int:
        return self.weights.shape[0]


def hermitian(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + np.conj(np.swapaxes(mat, -1, -2)))


def load_diagonal(phi: np.ndarray, delta: float = DIAGONAL_LOADING) -> np.ndarray:
    """phi + delta * (trace / M) * I, with a floor so silent bins stay invertible."""
    m = phi.shape[-1]
    level = np.maximum(np.real(np.trace(phi, axis1=-2, axis2=-1)) / m, TRACE_FLOOR)
    return phi + (delta * level)[..., None, None] * np.eye(m)


# ── Localization masks ──────────────────────────────────────────────


def directional_power(spec: MultichannelSpectrogram, geom: UcaGeometry, thetas) -> np.ndarray:
    """a^n(t, f) = |d(theta_n, f)^H y(t, f)|^2, shape (N, T, F)."""
    d = steering_tensor(geom, thetas, spec.freqs)  # (F, M, N)
    proj = np.einsum("fmn,tmf->ntf", np.conj(d), spec.data)
    return np.abs(proj) ** 2


def source_softmax(a: np.ndarray) -> np.ndarray:
    """Softmax over the source axis with max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[0] < 2:
        raise MaskError("source softmax needs at least two sources")
    shifted = np.exp(a - a.max(axis=0, keepdims=True))
    return shifted / shifted.sum(axis=0, keepdims=True)


def sparsify_mask(nu: np.ndarray, kappa: float) -> LocalizationMask:
    """l = ReLU(nu - kappa) / (1 - kappa)."""
    if not (0.0 <= kappa < 1.0):
        raise MaskError(f"sparsity constant must lie in [0, 1), got {kappa}")
    return LocalizationMask(np.maximum(np.asarray(nu) - kappa, 0.0) / (1.0 - kappa))


def localization_mask(spec: MultichannelSpectrogram, geom: UcaGeometry, thetas,
                      kappa: float = 0.5) -> LocalizationMask:
    return sparsify_mask(source_softmax(directional_power(spec, geom, thetas)), kappa)


def ilm(spec: MultichannelSpectrogram, geom: UcaGeometry, truth_doas, kappa: float = 0.5) -> LocalizationMask:
    """Ideal localization mask: the localization mask at the true directions."""
    return localization_mask(spec, geom, truth_doas, kappa)


def ibm(reference_specs: list[MultichannelSpectrogram], ref_channel: int = REF_CHANNEL) -> LocalizationMask:
    """Ideal binary mask from reference magnitudes; ties go to the lowest source index."""
    mags = np.stack([np.abs(s.data[:, ref_channel, :]) for s in reference_specs])
    winner = np.argmax(mags, axis=0)
    return LocalizationMask((np.arange(len(reference_specs))[:, None, None] == winner[None]).astype(np.float64))


# ── Spatial covariance ──────────────────────────────────────────────


def input_scm(spec: MultichannelSpectrogram) -> SpatialCovariance:
    """Phi_y(f) = (1/T) sum_t y y^H."""
    y = spec.data
    phi = np.einsum("tmf,tnf->fmn", y, np.conj(y)) / y.shape[0]
    return SpatialCovariance(hermitian(phi))


def masked_scm(spec: MultichannelSpectrogram, mask: LocalizationMask) -> list[SpatialCovariance]:
    """Mask-weighted, mask-normalized SCM per source.

    Frequencies whose mask column sums to zero fall back to the unweighted SCM
    and are counted in `fallback_bins`.
    """
    y = spec.data
    l = mask.values
    if l.shape[1:] != (y.shape[0], y.shape[2]):
        raise MaskError(f"mask shape {l.shape[1:]} does not match spectrogram {(y.shape[0], y.shape[2])}")

    unweighted = input_scm(spec).matrices
    totals = l.sum(axis=1)  # (N, F)

    result = []
    for n in range(l.shape[0]):
        weighted = np.einsum("tmf,tkf->fmk", l[n][:, None, :] * y, np.conj(y))
        empty = totals[n] <= 0.0
        phi = np.empty_like(unweighted)
        phi[~empty] = weighted[~empty] / totals[n][~empty, None, None]
        phi[empty] = unweighted[empty]
        n_empty = int(empty.sum())
        if n_empty:
            logger.warning("source %d: %d all-zero mask bins fell back to the input SCM", n, n_empty)
        result.append(SpatialCovariance(hermitian(phi), fallback_bins=n_empty))
    return result


def interference_scm(source_scms: list[SpatialCovariance], n: int) -> SpatialCovariance:
    """Sum of every other source's SCM."""
    if len(source_scms) < 2:
        raise BeamformerError("interference", "needs at least two sources")
    others = [s.matrices for i, s in enumerate(source_scms) if i != n]
    total = others[0].copy()
    for phi in others[1:]:
        total = total + phi
    return SpatialCovariance(total)


# ── Beamformers ─────────────────────────────────────────────────────


def _collisions(thetas) -> list[tuple[float, float]]:
    thetas = np.mod(np.asarray(thetas, dtype=np.float64), 2 * np.pi)
    hits = []
    for i in range(len(thetas)):
        for j in range(i + 1, len(thetas)):
            gap = abs(thetas[i] - thetas[j])
            if min(gap, 2 * np.pi - gap) < 1e-9:
                hits.append((float(np.degrees(thetas[i])), float(np.degrees(thetas[j]))))
    return hits


def lcmp_weights(phi_y: SpatialCovariance, G: np.ndarray, n: int | None = None,
                 thetas=None, delta: float = DIAGONAL_LOADING) -> BeamformerWeights:
    """b = Phi^-1 G (G^H Phi^-1 G)^-1 mu_n on the loaded input SCM.

    G has shape (F, M, N). Bins whose constraint Gram is numerically singular
    (the DC bin, where every steering vector is all ones) get zero weights.
    """
    if thetas is not None and _collisions(thetas):
        raise BeamformerError("lcmp", f"coincident steering directions (deg): {_collisions(thetas)}")

    phi = load_diagonal(phi_y.matrices, delta)
    a = np.linalg.solve(phi, G)                        # (F, M, N)
    gram = np.einsum("fmi,fmj->fij", np.conj(G), a)    # (F, N, N)
    with np.errstate(divide="ignore", invalid="ignore"):
        degenerate = ~(np.linalg.cond(gram) <= GRAM_CONDITION_LIMIT)
    if degenerate.all():
        raise BeamformerError("lcmp", "constraint matrix singular at every frequency (angle collision)")

    n_src = G.shape[-1]
    gram_ok = np.where(degenerate[:, None, None], np.eye(n_src), gram)
    # (A C^-1)^T = C^-T A^T, so row n of the solve is b^n(f)
    bt = np.linalg.solve(np.swapaxes(gram_ok, -1, -2), np.swapaxes(a, -1, -2))  # (F, N, M)
    b = np.transpose(bt, (1, 0, 2))                                              # (N, F, M)
    b[:, degenerate, :] = 0.0
    if degenerate.any():
        logger.debug("lcmp: %d degenerate bins zeroed", int(degenerate.sum()))
    if n is not None:
        b = b[n:n + 1]
    return BeamformerWeights(b, BeamformerKind.LCMP, degenerate_bins=int(degenerate.sum()))


def mvdr_weights(phi_intf: SpatialCovariance, d_n: np.ndarray,
                 delta: float = DIAGONAL_LOADING) -> BeamformerWeights:
    """b = Phi_intf^-1 d / (d^H Phi_intf^-1 d); d_n has shape (F, M)."""
    phi = load_diagonal(phi_intf.matrices, delta)
    num = np.linalg.solve(phi, d_n[..., None])[..., 0]
    den = np.einsum("fm,fm->f", np.conj(d_n), num)
    if not np.all(np.isfinite(num)) or np.any(np.abs(den) < 1e-300):
        raise BeamformerError("mvdr", "interference SCM numerically singular after loading")
    return BeamformerWeights((num / den[:, None])[None], BeamformerKind.MVDR)


def mvdr_ref_weights(phi_intf: SpatialCovariance, phi_n: SpatialCovariance,
                     ref_index: int = REF_CHANNEL, delta: float = DIAGONAL_LOADING) -> BeamformerWeights:
    """b = (Phi_intf^-1 Phi_n / Tr(Phi_intf^-1 Phi_n)) u_ref."""
    phi = load_diagonal(phi_intf.matrices, delta)
    ratio = np.linalg.solve(phi, phi_n.matrices)
    trace = np.trace(ratio, axis1=-2, axis2=-1)
    if np.any(np.abs(trace) < TRACE_FLOOR):
        bad = np.flatnonzero(np.abs(trace) < TRACE_FLOOR)
        raise BeamformerError("mvdr-ref", f"near-zero trace at bins {bad[:8].tolist()}: degenerate SCMs")
    return BeamformerWeights((ratio[:, :, ref_index] / trace[:, None])[None], BeamformerKind.MVDR_REF)


def apply_beamformer(spec: MultichannelSpectrogram, weights: BeamformerWeights) -> list[MultichannelSpectrogram]:
    """x^n(t, f) = b^n(f)^H y(t, f), one single-channel spectrogram per source."""
    w = weights.weights
    if w.shape[1:] != (spec.n_bins, spec.n_channels):
        raise BeamformerError(weights.kind.value, f"weights {w.shape[1:]} do not match spectrogram")
    out = np.einsum("nfm,tmf->ntf", np.conj(w), spec.data)
    return [MultichannelSpectrogram(x[:, None, :], spec.config, spec.sample_rate) for x in out]


def beamform_all(spec: MultichannelSpectrogram, geom: UcaGeometry, kind: BeamformerKind,
                 thetas=None, mask: LocalizationMask | None = None,
                 ref_channel: int = REF_CHANNEL, delta: float = DIAGONAL_LOADING):
    """Weights for every source with the chosen beamformer.

    Returns (weights (N, F, M), diagnostics dict).
    """
    if kind == BeamformerKind.LCMP:
        G = steering_tensor(geom, thetas, spec.freqs)
        bw = lcmp_weights(input_scm(spec), G, thetas=thetas, delta=delta)
        return bw, {"degenerate_bins": bw.degenerate_bins, "mask_fallback_bins": 0}

    if mask is None:
        raise MaskError(f"{kind.value} needs a mask")
    scms = masked_scm(spec, mask)
    weights = []
    for n in range(mask.n_sources):
        intf = interference_scm(scms, n)
        if kind == BeamformerKind.MVDR:
            d_n = steering_tensor(geom, [thetas[n]], spec.freqs)[:, :, 0]
            weights.append(mvdr_weights(intf, d_n, delta).weights[0])
        else:
            weights.append(mvdr_ref_weights(intf, scms[n], ref_channel, delta).weights[0])
    diag = {"degenerate_bins": 0, "mask_fallback_bins": sum(s.fallback_bins for s in scms)}
    return BeamformerWeights(np.stack(weights), kind), diag
