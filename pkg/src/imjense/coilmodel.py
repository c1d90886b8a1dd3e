"""Polynomial coil-sensitivity model.

Each coil's complex sensitivity is two real polynomials in the normalized
coordinates, ``sum_{p,q=0..N} c[j, part, p, q] x^p y^q``, one per part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coords import CoordinateGrid
from .tensorgrad import ShapeError, Tape


@dataclass
class PolyCoefficients:
    coeffs: np.ndarray  # (c, 2, N+1, N+1); [j, 0] real part, [j, 1] imaginary part

    @property
    def n_coils(self) -> int:
        return self.coeffs.shape[0]

    @property
    def order(self) -> int:
        return self.coeffs.shape[2] - 1

    def flat(self) -> np.ndarray:
        """(c, 2, (N+1)^2) view matching the monomial basis column order."""
        c, _, k, _ = self.coeffs.shape
        return self.coeffs.reshape(c, 2, k * k)


def init_poly(n_coils: int, order: int = 15, seed: int = 0, dtype=np.float64) -> PolyCoefficients:
    """i.i.d. Normal(0, (1/(N+1))^2) coefficients."""
    if n_coils < 1 or order < 0:
        raise ValueError(f"need n_coils >= 1 and order >= 0, got {n_coils}, {order}")
    rng = np.random.default_rng(seed)
    k = order + 1
    return PolyCoefficients(rng.normal(0.0, 1.0 / k, size=(n_coils, 2, k, k)).astype(dtype))


def monomial_index(p: int, q: int, order: int) -> int:
    return p * (order + 1) + q


def build_basis(grid: CoordinateGrid | np.ndarray, order: int) -> np.ndarray:
    """(n, (N+1)^2) matrix whose column p*(N+1)+q is x^p y^q, built by repeated products."""
    c = grid.coords if isinstance(grid, CoordinateGrid) else np.asarray(grid)
    x, y = c[:, 0], c[:, 1]
    n = c.shape[0]
    k = order + 1
    xp = np.empty((n, k))
    yq = np.empty((n, k))
    xp[:, 0] = 1.0
    yq[:, 0] = 1.0
    for i in range(1, k):
        xp[:, i] = xp[:, i - 1] * x
        yq[:, i] = yq[:, i - 1] * y
    return (xp[:, :, None] * yq[:, None, :]).reshape(n, k * k)


def eval_sensitivities(coeffs: PolyCoefficients, basis: np.ndarray, grid_shape, tape: Tape,
                       requires_grad=True):
    """Record the maps on ``tape``; returns ``(node (2, c, d1, d2), coefficient leaf id)``."""
    d1, d2 = grid_shape
    if basis.shape != (d1 * d2, (coeffs.order + 1) ** 2):
        raise ShapeError(f"basis {basis.shape} does not match grid {grid_shape} and order {coeffs.order}")
    leaf = tape.leaf(coeffs.flat(), requires_grad)
    maps = tape.poly(leaf, basis.astype(coeffs.coeffs.dtype, copy=False))
    return tape.reshape(maps, (2, coeffs.n_coils, d1, d2)), leaf


def sensitivity_maps(coeffs: PolyCoefficients, basis: np.ndarray, grid_shape) -> np.ndarray:
    """Complex maps (c, d1, d2) without gradient tracking."""
    tape = Tape()
    node, _ = eval_sensitivities(coeffs, basis, grid_shape, tape, requires_grad=False)
    v = tape.value(node)
    return v[0] + 1j * v[1]


def normalize_maps(maps: np.ndarray):
    """Divide by the root-sum-of-squares over coils.

    Pixels where the RSS is zero are left unchanged; returns ``(maps, n_degenerate)``.
    """
    maps = np.asarray(maps)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    ok = rss > 0
    out = maps.astype(np.result_type(maps.dtype, np.complex64), copy=True)
    out[:, ok] = maps[:, ok] / rss[ok]
    return out, int(np.count_nonzero(~ok))
