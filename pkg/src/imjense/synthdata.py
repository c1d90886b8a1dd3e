"""Synthetic test data: phantom, coil profiles, Cartesian masks, noisy acquisition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coords import make_grid
from .formats import read_kspc, write_kspc  # noqa: F401  (KSPC I/O lives with the data it carries)
from .mrop import KSpaceVolume, SamplingMask, forward_op

# Modified Shepp-Logan (Toft): (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)

# phase = sum a * x^p * y^q over ((p, q), a)
DEFAULT_PHASE = (((1, 0), 0.8), ((0, 1), 0.6), ((1, 1), 0.3), ((2, 0), -0.4))

COIL_RADIUS = 1.5      # bump centers sit outside the [-1, 1]^2 field of view
COIL_WIDTH = 1.0       # Gaussian sigma in normalized units
COIL_FLOOR = 0.1       # magnitude floor, keeps the RSS >= 0.1
COIL_PHASE_SLOPE = 1.0 # rad per normalized unit


@dataclass
class PhantomSpec:
    d1: int
    d2: int
    ellipses: tuple = SHEPP_LOGAN
    phase: tuple = DEFAULT_PHASE
    sigma_n: float = 0.0
    seed: int = 0


@dataclass
class MaskSpec:
    d_pe: int
    R: int
    acs: int
    d_ro: int = field(default=0)  # readout length; defaults to d_pe

    def __post_init__(self):
        if not 1 <= self.R <= self.d_pe:
            raise ValueError(f"R must lie in [1, {self.d_pe}], got {self.R}")
        if not 0 <= self.acs <= self.d_pe:
            raise ValueError(f"ACS must lie in [0, {self.d_pe}], got {self.acs}")


def _ellipse_inside(u, v, ellipse):
    _, a, b, x0, y0, angle = ellipse
    t = np.deg2rad(angle)
    du, dv = u - x0, v - y0
    return ((du * np.cos(t) + dv * np.sin(t)) / a) ** 2 + ((dv * np.cos(t) - du * np.sin(t)) / b) ** 2 <= 1.0


def phantom_axes(d1, d2):
    """Ellipse-plane coordinates (u horizontal, v vertical up) for each pixel."""
    g = make_grid(d1, d2)
    x = g.coords[:, 0].reshape(d1, d2)
    y = g.coords[:, 1].reshape(d1, d2)
    return y, -x, x, y


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex ground-truth image: ellipse sum (clipped to [0, 1]) times a smooth phase."""
    u, v, x, y = phantom_axes(spec.d1, spec.d2)
    mag = np.zeros((spec.d1, spec.d2))
    for e in spec.ellipses:
        mag[_ellipse_inside(u, v, e)] += e[0]
    mag = np.clip(mag, 0.0, 1.0)
    phi = np.zeros_like(mag)
    for (p, q), a in spec.phase:
        phi += a * x ** p * y ** q
    return mag * np.exp(1j * np.angle(np.exp(1j * phi)))


def simulate_coils(n_coils: int, d1: int, d2: int, seed: int = 0) -> np.ndarray:
    """Smooth complex receive profiles, shape (c, d1, d2).

    Coil j is a Gaussian bump centred at angle 2*pi*j/c on a circle of radius
    ``COIL_RADIUS``, lifted by ``COIL_FLOOR``, with a random linear phase of
    slope at most ``COIL_PHASE_SLOPE``.
    """
    if n_coils < 1:
        raise ValueError("need at least one coil")
    rng = np.random.default_rng(seed)
    g = make_grid(d1, d2)
    x = g.coords[:, 0].reshape(d1, d2)
    y = g.coords[:, 1].reshape(d1, d2)
    maps = np.empty((n_coils, d1, d2), dtype=np.complex128)
    for j in range(n_coils):
        ang = 2 * np.pi * j / n_coils
        cx, cy = COIL_RADIUS * np.cos(ang), COIL_RADIUS * np.sin(ang)
        bump = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * COIL_WIDTH ** 2))
        mag = COIL_FLOOR + (1 - COIL_FLOOR) * bump
        direction = rng.uniform(0, 2 * np.pi)
        slope = COIL_PHASE_SLOPE * rng.uniform(0, 1) / np.sqrt(2)
        offset = rng.uniform(-np.pi, np.pi)
        phase = offset + slope * (np.cos(direction) * x + np.sin(direction) * y)
        maps[j] = mag * np.exp(1j * phase)
    return maps


def mask_lines(spec: MaskSpec) -> tuple[int, ...]:
    """Every R-th line from centered index 0, plus a centred block of ACS lines."""
    d = spec.d_pe
    start = d // 2 - spec.acs // 2
    if start < 0 or start + spec.acs > d:
        raise ValueError(f"ACS block [{start}, {start + spec.acs - 1}] exceeds 0..{d - 1}")
    lines = set(range(0, d, spec.R)) | set(range(start, start + spec.acs))
    return tuple(sorted(lines))


def make_mask(spec: MaskSpec) -> SamplingMask:
    return SamplingMask(spec.d_ro or spec.d_pe, spec.d_pe, mask_lines(spec))


def undersampling_rate(mask: SamplingMask) -> float:
    return len(mask.kept_lines) / mask.d2


def acquire(truth: np.ndarray, coils: np.ndarray, mask: SamplingMask, sigma_n: float = 0.0,
            seed: int = 0) -> KSpaceVolume:
    """S_j = M (F(C_j I) + n_j) with complex Gaussian noise of std ``sigma_n`` per component."""
    if sigma_n < 0:
        raise ValueError("sigma_n must be non-negative")
    if sigma_n == 0:
        return KSpaceVolume(forward_op(truth, coils, mask), mask)
    k = forward_op(truth, coils, None)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma_n, size=k.shape) + 1j * rng.normal(0.0, sigma_n, size=k.shape)
    return KSpaceVolume(np.where(mask.matrix(), k + noise, 0), mask)
