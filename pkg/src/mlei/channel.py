"""Near-field line-of-sight channel for a uniform linear array.

Each terminal contributes one column: the spherical-wave steering vector
seen from the array, normalised so that the centre of the array has unit
gain and zero phase.
"""

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 2.998e8


@dataclass(frozen=True)
class ArrayGeometry:
    n_antennas: int
    spacing: float
    wavelength: float
    aperture: float

    def __post_init__(self):
        if self.n_antennas < 1:
            raise ValueError("n_antennas must be >= 1")
        if self.spacing <= 0 or self.wavelength <= 0 or self.aperture <= 0:
            raise ValueError("spacing, wavelength and aperture must be positive")

    @property
    def wavenumber(self):
        return 2.0 * math.pi / self.wavelength

    @classmethod
    def from_frequency(cls, n_antennas, frequency, spacing=None, aperture=None):
        """Half-wavelength spacing and a 32-wavelength aperture unless given."""
        lam = SPEED_OF_LIGHT / frequency
        return cls(n_antennas, lam / 2 if spacing is None else spacing, lam,
                   32 * lam if aperture is None else aperture)


@dataclass(frozen=True)
class TerminalPlacement:
    theta: float
    r: float

    def __post_init__(self):
        if not -1.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (-1, 1), got {self.theta}")
        if self.r <= 0:
            raise ValueError(f"r must be positive, got {self.r}")


def element_offsets(n):
    """Element positions in units of spacing, centred on zero."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    return (2 * idx - n + 1) / 2.0


def element_distance(placement, offset, spacing):
    return np.sqrt(placement.r ** 2 + (offset * spacing) ** 2
                   - 2 * placement.r * offset * placement.theta * spacing)


def steering_vector(geometry, placement):
    """``(r / r_n) * exp(-j k (r_n - r))`` for every element ``n``."""
    rn = element_distance(placement, element_offsets(geometry.n_antennas), geometry.spacing)
    return (placement.r / rn) * np.exp(-1j * geometry.wavenumber * (rn - placement.r))


def build_channel(geometry, placements):
    if len(placements) < 1:
        raise ValueError("need at least one terminal")
    return np.stack([steering_vector(geometry, p) for p in placements], axis=1)


def fresnel_bounds(aperture, wavelength):
    """Radiative near-field range ``(0.62 sqrt(D^3/lambda), 2 D^2/lambda)``."""
    if aperture <= 0 or wavelength <= 0:
        raise ValueError("aperture and wavelength must be positive")
    return 0.62 * math.sqrt(aperture ** 3 / wavelength), 2.0 * aperture ** 2 / wavelength


def sample_placements(m, bounds, rng):
    """``m`` terminals, angle uniform in (-1, 1) and range uniform in ``bounds``."""
    r_min, r_max = bounds
    if not 0 < r_min <= r_max:
        raise ValueError(f"invalid range bounds {bounds}")
    theta = rng.uniform(-1.0, 1.0, m)
    # uniform() is half-open; the open interval is needed for theta
    theta = np.where(theta == -1.0, 0.0, theta)
    r = rng.uniform(r_min, r_max, m) if r_max > r_min else np.full(m, r_min)
    return [TerminalPlacement(float(a), float(b)) for a, b in zip(theta, r)]


def realify_matrix(a):
    """``[[Re A, -Im A], [Im A, Re A]]``; works on stacked (..., N, M) arrays."""
    a = np.asarray(a)
    top = np.concatenate([a.real, -a.imag], axis=-1)
    bottom = np.concatenate([a.imag, a.real], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def realify_vector(v):
    """``[Re v, Im v]`` along the last axis."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1).astype(np.float64)


@dataclass
class RealSystem:
    A: np.ndarray
    y: np.ndarray
    x: np.ndarray
    n: np.ndarray


def realify(a, y, x, n):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"channel must be a matrix, got shape {a.shape}")
    rows, cols = a.shape
    y, x, n = (np.asarray(v).reshape(-1) for v in (y, x, n))
    if y.size != rows or n.size != rows or x.size != cols:
        raise ValueError(
            f"dimension mismatch: A is {rows}x{cols}, y={y.size}, x={x.size}, n={n.size}")
    return RealSystem(realify_matrix(a), realify_vector(y), realify_vector(x), realify_vector(n))
