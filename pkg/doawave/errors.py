"""
doawave — Error Types
"""


class DoawaveError(Exception):
    """Base class for every error raised by doawave."""


class InputTooShortError(DoawaveError):
    def __init__(self, n_samples: int, fft_size: int):
        self.n_samples = n_samples
        self.fft_size = fft_size
        super().__init__(
            f"input too short: {n_samples} samples, need at least one frame of {fft_size}"
        )


class StftConfigError(DoawaveError):
    pass


class WavFormatError(DoawaveError):
    """Malformed or unsupported RIFF/WAVE file."""

    def __init__(self, path: str, chunk: str, reason: str):
        self.path = str(path)
        self.chunk = chunk
        self.reason = reason
        super().__init__(f"{self.path}: '{chunk}' chunk: {reason}")


class GeometryError(DoawaveError):
    pass


class PlacementError(DoawaveError):
    pass


class SampleRateMismatchError(DoawaveError):
    pass


class GridError(DoawaveError):
    pass


class DoaError(DoawaveError):
    pass


class BeamformerError(DoawaveError):
    def __init__(self, kind: str, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}")


class MaskError(DoawaveError):
    pass


class MetricError(DoawaveError):
    pass


class ConfigError(DoawaveError):
    pass
