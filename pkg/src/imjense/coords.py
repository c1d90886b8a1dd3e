"""Normalized pixel-coordinate grids and the positional encoding used by the
ReLU ablation network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PE_BANDS = 6


@dataclass(frozen=True)
class CoordinateGrid:
    d1: int
    d2: int
    coords: np.ndarray  # (d1*d2, 2), row k <-> pixel (k // d2, k % d2)

    @property
    def shape(self):
        return (self.d1, self.d2)

    def pixel_of(self, k):
        return divmod(k, self.d2)


def _axis(n):
    # spacing 2/(n-1), endpoints exactly -1 and 1
    return np.linspace(-1.0, 1.0, n)


def make_grid(d1: int, d2: int) -> CoordinateGrid:
    """Row-major grid over [-1, 1]^2: column 0 varies along d1 (x), column 1 along d2 (y)."""
    if d1 < 2 or d2 < 2:
        raise ValueError(f"grid needs at least 2 samples per axis, got {d1}x{d2}")
    x, y = np.meshgrid(_axis(d1), _axis(d2), indexing="ij")
    return CoordinateGrid(d1, d2, np.stack([x.ravel(), y.ravel()], axis=1))


def make_dense_grid(d1: int, d2: int, scale: int) -> CoordinateGrid:
    if int(scale) != scale or scale < 1:
        raise ValueError(f"scale must be an integer >= 1, got {scale}")
    return make_grid(int(scale) * d1, int(scale) * d2)


def positional_encode(coords, bands: int = DEFAULT_PE_BANDS) -> np.ndarray:
    """Map each coordinate v to [sin(2^0 pi v), cos(2^0 pi v), ..., cos(2^(L-1) pi v)].

    Accepts a CoordinateGrid or an (n, k) array; returns (n, 2*L*k).
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    c = coords.coords if isinstance(coords, CoordinateGrid) else np.asarray(coords)
    freqs = np.pi * 2.0 ** np.arange(bands)
    ang = c[:, :, None] * freqs  # (n, k, L)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (n, k, L, 2)
    return enc.reshape(c.shape[0], -1)
