"""
doawave — shared test fixtures
"""

import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from models import RoomSpec, Scenario, SourcePlacement, StftConfig, UcaGeometry  # noqa: E402
from services.simulate import make_dry_signal, synthesize_mixture  # noqa: E402

ROOM = RoomSpec(dims_m=(8.0, 7.0, 3.0), t60_s=0.3)
CENTER = (4.0, 3.5, 1.5)


def place(azimuth_deg: float, range_m: float = 2.5, center=CENTER) -> SourcePlacement:
    """Source in the array plane at the given azimuth."""
    az = math.radians(azimuth_deg)
    pos = (center[0] + range_m * math.cos(az), center[1] + range_m * math.sin(az), center[2])
    return SourcePlacement(azimuth_rad=az, range_m=range_m, height_m=center[2], position_m=pos)


def make_scenario(azimuths_deg, max_order: int = 0, geometry: UcaGeometry | None = None,
                  room: RoomSpec = ROOM, seed: int = 0) -> Scenario:
    return Scenario(
        room=room, array_center=CENTER, geometry=geometry or UcaGeometry.uniform(),
        sources=[place(a) for a in azimuths_deg], seed=seed, max_order=max_order,
    )


def make_record(azimuths_deg, max_order: int = 0, duration_s: float = 1.0, seed: int = 0):
    scenario = make_scenario(azimuths_deg, max_order, seed=seed)
    dry = [make_dry_signal(seed * 10 + n, duration_s) for n in range(len(azimuths_deg))]
    return synthesize_mixture(scenario, dry)


@pytest.fixture
def geom() -> UcaGeometry:
    return UcaGeometry.uniform(6, 0.05)


@pytest.fixture
def stft_cfg() -> StftConfig:
    return StftConfig(fft_size=512, hop=128)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def anechoic_pair():
    """Two anechoic sources 70 degrees apart, 1 s."""
    return make_record([40.0, 110.0], max_order=0)
