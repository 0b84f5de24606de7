"""
doawave — Room Simulation Service
Sampled room scenarios, image-method impulse responses and reverberant
multi-source mixtures with ground-truth directions.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from errors import PlacementError, SampleRateMismatchError
from models import RoomSpec, Scenario, SimulationConfig, SourcePlacement, UcaGeometry
from services.geometry import mic_positions
from services.signals import MultichannelWaveform, Waveform, read_wav

logger = logging.getLogger(__name__)

SINC_HALF_WIDTH = 40  # 81-tap fractional delay filter
DECAY_TARGET = 1e-3   # image amplitudes 60 dB below the direct path


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    sample_rate: int


@dataclass(frozen=True)
class MixtureRecord:
    mixture: MultichannelWaveform
    references: list[MultichannelWaveform]
    dry: list[Waveform]
    truth_doas: np.ndarray
    scenario: Scenario


# ── Room acoustics ──────────────────────────────────────────────────


def reflection_coefficient(room: RoomSpec) -> float:
    """Uniform pressure reflection coefficient from T60 via Eyring's formula."""
    lx, ly, lz = room.dims_m
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    absorption = 1.0 - math.exp(-0.161 * volume / (surface * room.t60_s))
    return math.sqrt(max(1.0 - absorption, 0.0))


def default_max_order(room: RoomSpec, cap: int = 17) -> int:
    beta = reflection_coefficient(room)
    if beta <= 0.0:
        return 0
    if beta >= 1.0:
        return cap
    return min(int(math.ceil(math.log(DECAY_TARGET) / math.log(beta))), cap)


def image_sources(room: RoomSpec, src, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """All image positions with at most max_order wall reflections.

    Along each axis the image coordinate is (1 - 2q) * s + 2 n L and the image
    has undergone |n - q| + |n| reflections.
    Returns (positions (K, 3), reflection counts (K,)).
    """
    src = np.asarray(src, dtype=np.float64)
    reach = max_order // 2 + 1
    n = np.arange(-reach, reach + 1)
    q = np.array([0, 1])
    nn, qq = np.meshgrid(n, q, indexing="ij")
    nn, qq = nn.ravel(), qq.ravel()
    refl_axis = np.abs(nn - qq) + np.abs(nn)

    coords, refls = [], []
    for axis in range(3):
        coords.append((1 - 2 * qq) * src[axis] + 2 * nn * room.dims_m[axis])
        refls.append(refl_axis)

    ix, iy, iz = np.meshgrid(*(np.arange(len(c)) for c in coords), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    order = refls[0][ix] + refls[1][iy] + refls[2][iz]
    keep = order <= max_order
    positions = np.stack([coords[0][ix[keep]], coords[1][iy[keep]], coords[2][iz[keep]]], axis=1)
    return positions, order[keep]


def _fractional_delay_taps(delay_samples: np.ndarray):
    """Hann-windowed sinc kernels centred on each (possibly fractional) delay."""
    n0 = np.round(delay_samples).astype(np.int64)
    frac = delay_samples - n0
    frac[np.abs(frac) < 1e-9] = 0.0
    k = np.arange(-SINC_HALF_WIDTH, SINC_HALF_WIDTH + 1)
    x = k[None, :] - frac[:, None]
    width = 2 * SINC_HALF_WIDTH + 1
    kernel = np.sinc(x) * 0.5 * (1.0 + np.cos(2.0 * np.pi * x / width))
    return n0[:, None] + k[None, :], kernel


def image_method_rir(room: RoomSpec, src, mic, max_order: int | None = None,
                     sample_rate: int = 16000, speed_of_sound: float = 343.0,
                     order_cap: int = 17) -> Rir:
    if max_order is None:
        max_order = default_max_order(room, order_cap)
    beta = reflection_coefficient(room)
    positions, order = image_sources(room, src, max_order)

    dist = np.linalg.norm(positions - np.asarray(mic, dtype=np.float64)[None, :], axis=1)
    amp = beta ** order / (4.0 * np.pi * dist)
    idx, kernel = _fractional_delay_taps(dist / speed_of_sound * sample_rate)

    taps = np.zeros(int(idx.max()) + 1)
    valid = idx >= 0
    np.add.at(taps, idx[valid], (amp[:, None] * kernel)[valid])
    return Rir(taps, sample_rate)


# ── Scenario sampling ───────────────────────────────────────────────


def _cyclic_gap(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def _inside(point, dims, margin) -> bool:
    return all(margin < p < d - margin for p, d in zip(point, dims))


def sample_scenario(rng_seed: int, config_ranges: SimulationConfig,
                    geometry: UcaGeometry | None = None) -> Scenario:
    """Deterministic scenario for a seed; retries until every source fits."""
    cfg = config_ranges
    geometry = geometry or UcaGeometry.uniform()
    rng = np.random.default_rng(rng_seed)
    min_sep = math.radians(cfg.min_separation_deg)
    margin = cfg.wall_margin_m

    for _ in range(cfg.max_retries):
        dims = tuple(float(rng.uniform(lo, hi)) for lo, hi in zip(cfg.room_min_m, cfg.room_max_m))
        room = RoomSpec(dims_m=dims, t60_s=float(rng.uniform(*cfg.t60_range_s)))
        center = (
            float(rng.uniform(margin, dims[0] - margin)),
            float(rng.uniform(margin, dims[1] - margin)),
            float(rng.uniform(*cfg.height_range_m)),
        )
        rotation = float(rng.uniform(0.0, 2 * math.pi)) if cfg.sample_rotation else 0.0
        if not _inside(center, dims, margin + geometry.radius_m):
            continue

        sources, world_az = [], []
        for _ in range(cfg.n_sources):
            placed = None
            for _ in range(100):
                az = float(rng.uniform(0.0, 2 * math.pi))
                rng_m = float(rng.uniform(*cfg.source_radius_m))
                height = float(rng.uniform(*cfg.height_range_m))
                pos = (center[0] + rng_m * math.cos(az), center[1] + rng_m * math.sin(az), height)
                if not _inside(pos, dims, margin):
                    continue
                if any(_cyclic_gap(az, other) < min_sep for other in world_az):
                    continue
                placed = SourcePlacement(
                    azimuth_rad=(az - rotation) % (2 * math.pi),
                    range_m=rng_m, height_m=height, position_m=pos,
                )
                break
            if placed is None:
                break
            sources.append(placed)
            world_az.append(az)

        if len(sources) == cfg.n_sources:
            return Scenario(
                room=room, array_center=center, array_rotation=rotation,
                geometry=geometry, sources=sources, seed=rng_seed,
                max_order=default_max_order(room, cfg.max_order_cap),
                relative_level_db=cfg.relative_level_db,
            )

    raise PlacementError(
        f"could not place {cfg.n_sources} sources after {cfg.max_retries} room draws (seed {rng_seed})"
    )


def truth_doas(scenario: Scenario) -> np.ndarray:
    cx, cy, _ = scenario.array_center
    return np.array([
        (math.atan2(s.position_m[1] - cy, s.position_m[0] - cx) - scenario.array_rotation) % (2 * math.pi)
        for s in scenario.sources
    ])


# ── Signals and mixing ──────────────────────────────────────────────


def make_dry_signal(rng_seed: int, duration_s: float, sample_rate: int = 16000) -> Waveform:
    """Speech-like stand-in: gated harmonic + band-limited noise words separated by pauses."""
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # voiced part: slowly gliding pitch with 1/k harmonic roll-off up to 4 kHz
    f0 = rng.uniform(90.0, 220.0) * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t))
    pitch_phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voiced = np.zeros(n)
    for k in range(1, int(4000.0 / f0.max()) + 1):
        voiced += np.sin(k * pitch_phase + rng.uniform(0, 2 * np.pi)) / k

    sos = signal.butter(4, [300.0, min(6000.0, 0.45 * sample_rate)], btype="bandpass",
                        fs=sample_rate, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    carrier = voiced / (np.abs(voiced).max() + 1e-12) + 0.5 * noise / (np.abs(noise).max() + 1e-12)

    # words of 150-600 ms, each followed by a pause of 120-350 ms
    envelope = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    while pos < n:
        word = int(rng.uniform(0.15, 0.6) * sample_rate)
        stop = min(pos + word, n)
        span = np.arange(stop - pos) / sample_rate
        syllables = 0.6 + 0.4 * np.abs(np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * span))
        envelope[pos:stop] = signal.windows.hann(word, sym=True)[:stop - pos] * syllables
        pos = stop + int(rng.uniform(0.12, 0.35) * sample_rate)

    samples = carrier * envelope
    peak = np.abs(samples).max()
    if peak > 0:
        samples = samples / peak
    return Waveform(samples, sample_rate)


def load_dry_corpus(directory, rng_seed: int, count: int, duration_s: float,
                    sample_rate: int = 16000) -> list[Waveform]:
    """Pick `count` WAV files deterministically and trim/pad them to duration_s."""
    files = sorted(Path(directory).glob("*.wav"))
    if len(files) < count:
        raise FileNotFoundError(f"need {count} WAV files in {directory}, found {len(files)}")
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration_s * sample_rate))
    picked = []
    for idx in rng.choice(len(files), size=count, replace=False):
        wave = read_wav(files[int(idx)])
        if wave.sample_rate != sample_rate:
            raise SampleRateMismatchError(
                f"{files[int(idx)]}: {wave.sample_rate} Hz, expected {sample_rate} Hz"
            )
        x = wave.channels[0][:n]
        x = np.pad(x, (0, n - x.shape[0]))
        peak = np.abs(x).max()
        picked.append(Waveform(x / peak if peak > 0 else x, sample_rate))
    return picked


def synthesize_mixture(scenario: Scenario, dry_signals: list[Waveform]) -> MixtureRecord:
    """Convolve each dry source with its RIRs and sum the images; no additive noise."""
    if len(dry_signals) != scenario.n_sources:
        raise ValueError(f"scenario has {scenario.n_sources} sources, got {len(dry_signals)} signals")
    rates = {w.sample_rate for w in dry_signals}
    if len(rates) != 1:
        raise SampleRateMismatchError(f"dry signals disagree on sample rate: {sorted(rates)}")
    fs = rates.pop()
    length = max(len(w) for w in dry_signals)
    gain = 10.0 ** (scenario.relative_level_db / 20.0)

    mics = mic_positions(scenario.geometry, scenario.array_center, scenario.array_rotation)
    dry, references = [], []
    for n, (wave, source) in enumerate(zip(dry_signals, scenario.sources)):
        x = np.pad(wave.samples, (0, length - len(wave))) * (gain if n > 0 else 1.0)
        dry.append(Waveform(x, fs))
        image = np.empty((mics.shape[0], length))
        for m, mic in enumerate(mics):
            rir = image_method_rir(scenario.room, source.position_m, mic, scenario.max_order,
                                   fs, scenario.geometry.speed_of_sound)
            image[m] = signal.fftconvolve(x, rir.taps)[:length]
        references.append(MultichannelWaveform(image, fs))

    mixture = references[0].channels.copy()
    for ref in references[1:]:
        mixture = mixture + ref.channels
    logger.debug("mixed %d sources, max_order=%d", len(references), scenario.max_order)
    return MixtureRecord(
        mixture=MultichannelWaveform(mixture, fs),
        references=references,
        dry=dry,
        truth_doas=truth_doas(scenario),
        scenario=scenario,
    )
