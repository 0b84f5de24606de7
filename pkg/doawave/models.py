"""
doawave — Pydantic Models
Configuration schemas, dataset records and report rows.
"""

import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.signal import check_COLA, get_window

# Published simulation ranges (rooms, reverberation, source radius).
PROTOCOL_ROOM_MIN = (5.0, 5.0, 2.6)
PROTOCOL_ROOM_MAX = (11.0, 11.0, 3.4)
PROTOCOL_T60_RANGE = (0.15, 0.5)
PROTOCOL_SOURCE_RADIUS = (1.5, 3.0)


class DoaMethod(str, Enum):
    SRP = "srp"
    MUSIC = "music"
    TOPS = "tops"
    ORACLE = "oracle"


class BeamformerKind(str, Enum):
    LCMP = "lcmp"
    MVDR = "mvdr"
    MVDR_REF = "mvdr-ref"


class MaskSource(str, Enum):
    ESTIMATED = "estimated"
    ILM = "ilm"
    IBM = "ibm"


class ReferenceKind(str, Enum):
    DRY = "dry"
    IMAGE = "image"


class TopsReference(str, Enum):
    BAND_CENTER = "band_center"
    MAX_POWER = "max_power"


class Stage(str, Enum):
    SIMULATE = "simulate"
    DOA = "doa"
    SEPARATE = "separate"
    GRADCHECK = "gradcheck"
    REPORT = "report"


class StageStatus(str, Enum):
    STARTED = "started"
    DONE = "done"
    FAILED = "failed"


# ── Signal / array descriptions ─────────────────────────────────────


class StftConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    fft_size: int = Field(default=512, gt=1)
    hop: int = Field(default=128, gt=0)
    window: str = "hann"

    @model_validator(mode="after")
    def _check_overlap_add(self):
        if self.fft_size % 2:
            raise ValueError(f"fft_size must be even, got {self.fft_size}")
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        win = get_window(self.window, self.fft_size, fftbins=True)
        if not check_COLA(win, self.fft_size, self.fft_size - self.hop):
            raise ValueError(
                f"window '{self.window}' is not COLA at fft_size={self.fft_size}, hop={self.hop}"
            )
        return self

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


class UcaGeometry(BaseModel):
    """Uniform circular array. Angles are in the array's own frame."""

    model_config = ConfigDict(frozen=True)

    radius_m: float = Field(gt=0.0)
    mic_angles_rad: tuple[float, ...]
    speed_of_sound: float = Field(default=343.0, gt=0.0)

    @field_validator("mic_angles_rad")
    @classmethod
    def _check_angles(cls, angles):
        if len(angles) < 2:
            raise ValueError("a circular array needs at least 2 microphones")
        for a in angles:
            if not (0.0 <= a < 2 * math.pi):
                raise ValueError(f"microphone angle {a} outside [0, 2pi)")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("microphone angles must be strictly increasing")
        return tuple(float(a) for a in angles)

    @classmethod
    def uniform(cls, n_mics: int = 6, radius_m: float = 0.05,
                speed_of_sound: float = 343.0) -> "UcaGeometry":
        angles = tuple(2 * math.pi * m / n_mics for m in range(n_mics))
        return cls(radius_m=radius_m, mic_angles_rad=angles, speed_of_sound=speed_of_sound)

    @property
    def n_mics(self) -> int:
        return len(self.mic_angles_rad)


class RoomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    dims_m: tuple[float, float, float]
    t60_s: float = Field(gt=0.0)

    @field_validator("dims_m")
    @classmethod
    def _positive_dims(cls, dims):
        if any(d <= 0 for d in dims):
            raise ValueError(f"room dimensions must be positive, got {dims}")
        return dims


class SourcePlacement(BaseModel):
    model_config = ConfigDict(frozen=True)

    azimuth_rad: float
    range_m: float = Field(gt=0.0)
    height_m: float
    position_m: tuple[float, float, float]


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    room: RoomSpec
    array_center: tuple[float, float, float]
    array_rotation: float = 0.0
    geometry: UcaGeometry
    sources: list[SourcePlacement]
    seed: int
    max_order: int = Field(default=17, ge=0)
    relative_level_db: float = 0.0

    @property
    def n_sources(self) -> int:
        return len(self.sources)


# ── Experiment configuration ────────────────────────────────────────


def _ordered(pair, name):
    lo, hi = pair
    if lo > hi:
        raise ValueError(f"{name}: lower bound {lo} above upper bound {hi}")
    return pair


class SimulationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    room_min_m: tuple[float, float, float] = PROTOCOL_ROOM_MIN
    room_max_m: tuple[float, float, float] = PROTOCOL_ROOM_MAX
    t60_range_s: tuple[float, float] = PROTOCOL_T60_RANGE
    source_radius_m: tuple[float, float] = PROTOCOL_SOURCE_RADIUS
    height_range_m: tuple[float, float] = (1.0, 2.0)
    wall_margin_m: float = Field(default=0.3, ge=0.0)
    n_sources: int = Field(default=2, ge=1, le=4)
    min_separation_deg: float = Field(default=10.0, ge=0.0)
    count: int = Field(default=20, ge=1)
    max_order_cap: int = Field(default=17, ge=0)
    relative_level_db: float = 0.0
    duration_s: float = Field(default=4.0, gt=0.0)
    sample_rate: int = Field(default=16000, gt=0)
    sample_rotation: bool = False
    dry_dir: Optional[str] = None
    max_retries: int = Field(default=1000, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self):
        for axis in range(3):
            _ordered((self.room_min_m[axis], self.room_max_m[axis]), f"room axis {axis}")
        _ordered(self.t60_range_s, "t60_range_s")
        _ordered(self.source_radius_m, "source_radius_m")
        _ordered(self.height_range_m, "height_range_m")
        if self.t60_range_s[0] <= 0:
            raise ValueError("t60 must be positive")
        return self

    def paper_range_violations(self) -> list[str]:
        """Names of ranges that leave the published simulation protocol."""
        problems = []
        for axis in range(3):
            if self.room_min_m[axis] < PROTOCOL_ROOM_MIN[axis] or self.room_max_m[axis] > PROTOCOL_ROOM_MAX[axis]:
                problems.append(f"room axis {axis}")
        if self.t60_range_s[0] < PROTOCOL_T60_RANGE[0] or self.t60_range_s[1] > PROTOCOL_T60_RANGE[1]:
            problems.append("t60_range_s")
        if (self.source_radius_m[0] < PROTOCOL_SOURCE_RADIUS[0]
                or self.source_radius_m[1] > PROTOCOL_SOURCE_RADIUS[1]):
            problems.append("source_radius_m")
        return problems


class ArrayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_mics: int = Field(default=6, ge=2)
    radius_m: float = Field(default=0.05, gt=0.0)
    mic_angles_deg: Optional[list[float]] = None
    speed_of_sound: float = Field(default=343.0, gt=0.0)

    def to_geometry(self) -> UcaGeometry:
        if self.mic_angles_deg is None:
            return UcaGeometry.uniform(self.n_mics, self.radius_m, self.speed_of_sound)
        angles = tuple(math.radians(a % 360.0) for a in self.mic_angles_deg)
        return UcaGeometry(radius_m=self.radius_m, mic_angles_rad=angles,
                           speed_of_sound=self.speed_of_sound)


class DoaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    methods: list[DoaMethod] = [DoaMethod.SRP, DoaMethod.MUSIC, DoaMethod.TOPS]
    gammas: list[float] = [1.0, 5.0, 10.0]
    band_hz: tuple[float, float] = (300.0, 4000.0)
    srp_band_hz: Optional[tuple[float, float]] = None
    min_separation_deg: float = Field(default=10.0, ge=0.0)
    posterior_window_deg: float = Field(default=20.0, gt=0.0)
    temperature: float = Field(default=0.05, gt=0.0)
    circular_mean: bool = False
    tops_reference: TopsReference = TopsReference.BAND_CENTER
    music_normalize: bool = False
    spectrum_svg_dir: Optional[str] = None

    @field_validator("methods")
    @classmethod
    def _no_oracle(cls, methods):
        if DoaMethod.ORACLE in methods:
            raise ValueError("'oracle' is a separation DOA source, not an estimation method")
        return methods


class SeparationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beamformers: list[BeamformerKind] = [BeamformerKind.MVDR_REF]
    doa_sources: list[DoaMethod] = [DoaMethod.ORACLE, DoaMethod.SRP]
    masks: list[MaskSource] = [MaskSource.ESTIMATED, MaskSource.ILM, MaskSource.IBM]
    kappa: float = Field(default=0.5, ge=0.0, lt=1.0)
    ref_channel: int = Field(default=1, ge=0)
    reference_kind: ReferenceKind = ReferenceKind.IMAGE
    doa_gamma: float = 10.0
    diagonal_loading: float = Field(default=1e-6, ge=0.0)
    write_wavs: bool = True
    mask_plot_format: Optional[str] = None

    @field_validator("mask_plot_format")
    @classmethod
    def _plot_format(cls, fmt):
        if fmt is not None and fmt not in ("png", "svg"):
            raise ValueError(f"mask plots are png or svg, got '{fmt}'")
        return fmt


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenarios: int = Field(default=5, ge=1)
    draws: int = Field(default=20, ge=1)
    beamformer: BeamformerKind = BeamformerKind.LCMP
    kappa: float = Field(default=0.5, ge=0.0, lt=1.0)
    step: float = Field(default=1e-5, gt=0.0)
    kink_tol: float = Field(default=1e-6, ge=0.0)
    perturb_deg: float = Field(default=15.0, ge=0.0)
    duration_s: float = Field(default=1.0, gt=0.0)
    descent_steps: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=1e-2, gt=0.0)
    descent_offset_deg: float = 10.0
    anechoic: bool = True


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    jobs: int = Field(default=1, ge=1)
    out_dir: str = "runs/default"
    paper_ranges: bool = False
    stages: list[Stage] = [Stage.SIMULATE, Stage.DOA, Stage.SEPARATE, Stage.GRADCHECK, Stage.REPORT]
    simulation: SimulationConfig = SimulationConfig()
    stft: StftConfig = StftConfig()
    array: ArrayConfig = ArrayConfig()
    doa: DoaConfig = DoaConfig()
    separation: SeparationConfig = SeparationConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()

    @model_validator(mode="after")
    def _check_cross_refs(self):
        n_mics = (len(self.array.mic_angles_deg) if self.array.mic_angles_deg is not None
                  else self.array.n_mics)
        if self.separation.ref_channel >= n_mics:
            raise ValueError(
                f"ref_channel {self.separation.ref_channel} does not exist on a "
                f"{n_mics}-microphone array"
            )
        if self.simulation.n_sources >= n_mics:
            raise ValueError("subspace methods need fewer sources than microphones")
        return self


# ── Dataset and run records ─────────────────────────────────────────


class MixtureEntry(BaseModel):
    """One line of the dataset manifest (dataset.jsonl)."""

    utterance_id: str
    index: int
    seed: int
    scenario: Scenario
    truth_doas_deg: list[float]
    sample_rate: int
    mixture_path: str
    reference_paths: list[str]
    dry_paths: list[str]


class StageMarker(BaseModel):
    """One line of the run manifest (run_manifest.jsonl)."""

    utterance_id: str
    stage: Stage
    status: StageStatus
    fingerprint: str = ""  # hash of the stage-relevant configuration
    detail: str = ""


class DoaRow(BaseModel):
    utterance_id: str
    method: DoaMethod
    estimator: str  # "peak" or "posterior"
    gamma: float
    truth_deg: list[float]
    estimate_deg: list[float]
    permutation: list[int]
    errors_deg: list[float]
    mean_error_deg: float
    fallback: bool = False
    posterior_entropy_bits: Optional[float] = None


class SeparationRow(BaseModel):
    utterance_id: str
    beamformer: BeamformerKind
    doa: DoaMethod
    mask: MaskSource
    reference_kind: ReferenceKind
    source: int
    si_sdr_db: float
    mixture_si_sdr_db: float
    improvement_db: float
    mask_fallback_bins: int = 0
    degenerate_bins: int = 0


class GradcheckRow(BaseModel):
    scenario_id: str
    draw: int
    parameter: int
    theta_deg: list[float]
    analytic: float
    finite_difference: float
    relative_error: float
    kink: bool


class DescentRow(BaseModel):
    scenario_id: str
    truth_deg: list[float]
    init_deg: list[float]
    final_deg: list[float]
    final_error_deg: float
    steps: int
    initial_loss: float
    final_loss: float
