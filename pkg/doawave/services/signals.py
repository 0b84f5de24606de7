"""
doawave — Signals Service
Time-frequency analysis/synthesis, WAV I/O and the phase-spectrum view.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import check_COLA, get_window

from errors import InputTooShortError, StftConfigError, WavFormatError
from models import StftConfig

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
TWO_PI = 2.0 * np.pi

# RIFF/WAVE format codes we decode
_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE
_SUPPORTED_ENCODINGS = {(_WAVE_FORMAT_PCM, 16), (_WAVE_FORMAT_IEEE_FLOAT, 32)}


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class MultichannelWaveform:
    """Channels stored as an (M, L) array."""

    channels: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.ndim == 1:
            channels = channels[None, :]
        if channels.ndim != 2 or channels.shape[0] < 1:
            raise ValueError(f"expected (channels, samples), got shape {channels.shape}")
        if not np.all(np.isfinite(channels)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "channels", channels)

    @classmethod
    def from_waveforms(cls, waves: list[Waveform]) -> "MultichannelWaveform":
        rates = {w.sample_rate for w in waves}
        lengths = {len(w) for w in waves}
        if len(rates) != 1 or len(lengths) != 1:
            raise ValueError("channels must share sample rate and length")
        return cls(np.stack([w.samples for w in waves]), rates.pop())

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    def channel(self, m: int) -> Waveform:
        return Waveform(self.channels[m], self.sample_rate)


@dataclass(frozen=True)
class MultichannelSpectrogram:
    """Complex STFT tensor indexed (frame, channel, bin)."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise ValueError(f"spectrogram must be (T, M, F), got shape {data.shape}")
        if data.shape[2] != self.config.n_bins:
            raise ValueError(
                f"{data.shape[2]} bins do not match fft_size {self.config.fft_size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_bins(self) -> int:
        return self.data.shape[2]

    @property
    def freqs(self) -> np.ndarray:
        return bin_frequencies(self.config, self.sample_rate)

    def channel(self, m: int) -> "MultichannelSpectrogram":
        return MultichannelSpectrogram(self.data[:, m:m + 1, :], self.config, self.sample_rate)


@dataclass(frozen=True)
class PhaseSpectrum:
    data: np.ndarray


def bin_frequencies(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """f = bin * sample_rate / fft_size."""
    return np.arange(cfg.n_bins) * sample_rate / cfg.fft_size


def analysis_window(cfg: StftConfig) -> np.ndarray:
    return get_window(cfg.window, cfg.fft_size, fftbins=True)


def check_cola(cfg: StftConfig):
    win = analysis_window(cfg)
    if not check_COLA(win, cfg.fft_size, cfg.fft_size - cfg.hop):
        raise StftConfigError(
            f"window '{cfg.window}' is not COLA at fft_size={cfg.fft_size}, hop={cfg.hop}"
        )


def n_frames_for(n_samples: int, cfg: StftConfig) -> int:
    """Frames needed to cover n_samples with the final partial frame zero-padded."""
    if n_samples < cfg.fft_size:
        raise InputTooShortError(n_samples, cfg.fft_size)
    return 1 + -(-(n_samples - cfg.fft_size) // cfg.hop)


def stft(wave: MultichannelWaveform, cfg: StftConfig = StftConfig()) -> MultichannelSpectrogram:
    x = wave.channels
    n_frames = n_frames_for(x.shape[1], cfg)
    padded = (n_frames - 1) * cfg.hop + cfg.fft_size
    x = np.pad(x, ((0, 0), (0, padded - x.shape[1])))

    frames = sliding_window_view(x, cfg.fft_size, axis=1)[:, ::cfg.hop, :]  # (M, T, N)
    spec = np.fft.rfft(frames * analysis_window(cfg), axis=-1)
    return MultichannelSpectrogram(spec.transpose(1, 0, 2), cfg, wave.sample_rate)


def istft(spec: MultichannelSpectrogram, length: int | None = None) -> MultichannelWaveform:
    """Weighted overlap-add inverse of stft; exact away from the boundary frames."""
    cfg = spec.config
    check_cola(cfg)
    win = analysis_window(cfg)
    n_fft, hop = cfg.fft_size, cfg.hop

    frames = np.fft.irfft(spec.data.transpose(1, 0, 2), n=n_fft, axis=-1)  # (M, T, N)
    n_out = (spec.n_frames - 1) * hop + n_fft
    out = np.zeros((spec.n_channels, n_out))
    norm = np.zeros(n_out)
    for t in range(spec.n_frames):
        out[:, t * hop:t * hop + n_fft] += frames[:, t, :] * win
        norm[t * hop:t * hop + n_fft] += win ** 2

    covered = norm > 1e-10
    out[:, covered] /= norm[covered]
    out[:, ~covered] = 0.0
    if length is not None:
        out = out[:, :length] if length <= n_out else np.pad(out, ((0, 0), (0, length - n_out)))
    return MultichannelWaveform(out, spec.sample_rate)


def phase(spec: MultichannelSpectrogram) -> PhaseSpectrum:
    """Complex argument mapped into [0, 2pi); the argument of 0 is 0."""
    angles = np.mod(np.angle(spec.data), TWO_PI)
    angles[angles >= TWO_PI] = 0.0
    # signed zeros: angle(-0+0j) is pi
    angles[spec.data == 0] = 0.0
    return PhaseSpectrum(angles)


# ── WAV I/O ──────────────────────────────────────────────────────────


def _inspect_riff(path: Path):
    """Walk the RIFF chunk list so malformed files fail with the chunk named."""
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError(path, "RIFF", "missing RIFF/WAVE header")

    chunks = {}
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        start = pos + 8
        name = chunk_id.decode("ascii", "replace").strip()
        if start + size > len(blob):
            raise WavFormatError(
                path, name, f"declares {size} bytes but only {len(blob) - start} are present"
            )
        chunks[name] = blob[start:start + size]
        pos = start + size + (size & 1)

    for required in ("fmt", "data"):
        if required not in chunks:
            raise WavFormatError(path, required, "chunk missing")

    fmt = chunks["fmt"]
    if len(fmt) < 16:
        raise WavFormatError(path, "fmt", f"only {len(fmt)} bytes")
    audio_format, _, _, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        (audio_format,) = struct.unpack("<H", fmt[24:26])
    if (audio_format, bits) not in _SUPPORTED_ENCODINGS:
        raise WavFormatError(
            path, "fmt", f"unsupported encoding (format {audio_format:#06x}, {bits} bits)"
        )


def read_wav(path) -> MultichannelWaveform:
    path = Path(path)
    _inspect_riff(path)
    try:
        data, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as exc:
        raise WavFormatError(path, "data", str(exc)) from exc
    return MultichannelWaveform(data.T, sample_rate)


def write_wav(path, wave: MultichannelWaveform | Waveform, subtype: str = "FLOAT"):
    """Write float32 (default) or PCM_16 RIFF/WAVE."""
    if subtype not in ("FLOAT", "PCM_16"):
        raise ValueError(f"unsupported subtype '{subtype}'")
    if isinstance(wave, Waveform):
        wave = MultichannelWaveform(wave.samples[None, :], wave.sample_rate)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), wave.channels.T, wave.sample_rate, subtype=subtype, format="WAV")
