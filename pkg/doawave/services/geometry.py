"""
doawave — Array Geometry Service
Uniform circular array delays and far-field steering vectors.
"""

import numpy as np

from errors import GeometryError
from models import UcaGeometry


def mic_angles(geom: UcaGeometry) -> np.ndarray:
    return np.asarray(geom.mic_angles_rad, dtype=np.float64)


def delays(geom: UcaGeometry, theta: float) -> np.ndarray:
    """Signed delay of each microphone relative to the array center, in seconds.

    tau_m = (r / c) * cos(theta - psi_m); positive when the microphone hears the
    wavefront before the center does.
    """
    return (geom.radius_m / geom.speed_of_sound) * np.cos(theta - mic_angles(geom))


def delays_grid(geom: UcaGeometry, thetas) -> np.ndarray:
    """Delays for several angles at once, shape (M, N)."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    return (geom.radius_m / geom.speed_of_sound) * np.cos(thetas[None, :] - mic_angles(geom)[:, None])


def steering_vector(geom: UcaGeometry, theta: float, freq: float) -> np.ndarray:
    """Unit-modulus phasors exp(j 2 pi f tau_m(theta)), one per microphone."""
    if freq < 0:
        raise GeometryError(f"frequency must be non-negative, got {freq}")
    return np.exp(1j * 2.0 * np.pi * freq * delays(geom, theta))


def steering_matrix(geom: UcaGeometry, thetas, freq: float) -> np.ndarray:
    """Constraint matrix G with one steering vector per column, shape (M, N)."""
    if freq < 0:
        raise GeometryError(f"frequency must be non-negative, got {freq}")
    return np.exp(1j * 2.0 * np.pi * freq * delays_grid(geom, thetas))


def steering_tensor(geom: UcaGeometry, thetas, freqs) -> np.ndarray:
    """Steering matrices for every frequency, shape (F, M, N)."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(freqs < 0):
        raise GeometryError("frequencies must be non-negative")
    tau = delays_grid(geom, thetas)
    return np.exp(1j * 2.0 * np.pi * freqs[:, None, None] * tau[None, :, :])


def steering_tensor_derivative(geom: UcaGeometry, thetas, freqs) -> np.ndarray:
    """d/dtheta_n of column n of steering_tensor, shape (F, M, N)."""
    freqs = np.asarray(freqs, dtype=np.float64)
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    dtau = -(geom.radius_m / geom.speed_of_sound) * np.sin(
        thetas[None, :] - mic_angles(geom)[:, None]
    )
    omega = 1j * 2.0 * np.pi * freqs[:, None, None]
    return omega * dtau[None, :, :] * steering_tensor(geom, thetas, freqs)


def mic_positions(geom: UcaGeometry, center, rotation: float = 0.0) -> np.ndarray:
    """Cartesian microphone positions (M, 3) for an array placed in a room."""
    angles = mic_angles(geom) + rotation
    center = np.asarray(center, dtype=np.float64)
    offsets = np.stack([
        geom.radius_m * np.cos(angles),
        geom.radius_m * np.sin(angles),
        np.zeros_like(angles),
    ], axis=1)
    return center[None, :] + offsets
