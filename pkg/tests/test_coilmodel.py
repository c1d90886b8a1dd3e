import numpy as np
import pytest

from imjense.coilmodel import (PolyCoefficients, build_basis, eval_sensitivities, init_poly,
                               monomial_index, normalize_maps, sensitivity_maps)
from imjense.coords import make_grid
from imjense.tensorgrad import ShapeError, Tape


def brute_force_maps(coeffs, grid):
    """Direct double sum over (p, q) for every pixel and coil."""
    c, _, k, _ = coeffs.shape
    out = np.zeros((c, grid.d1 * grid.d2), dtype=complex)
    for j in range(c):
        for n, (x, y) in enumerate(grid.coords):
            s = 0j
            for p in range(k):
                for q in range(k):
                    s += (coeffs[j, 0, p, q] + 1j * coeffs[j, 1, p, q]) * x ** p * y ** q
            out[j, n] = s
    return out.reshape(c, grid.d1, grid.d2)


def test_init_deterministic_and_sized():
    a = init_poly(3, 15, seed=4)
    b = init_poly(3, 15, seed=4)
    assert a.coeffs.tobytes() == b.coeffs.tobytes()
    assert a.coeffs.shape == (3, 2, 16, 16)
    assert a.coeffs.size == 2 * 3 * 256


def test_init_std():
    c = init_poly(64, 15, seed=0).coeffs
    assert abs(c.std() / (1 / 16) - 1) < 0.10
    with pytest.raises(ValueError):
        init_poly(0, 3)


def test_basis_values():
    g = make_grid(5, 5)
    B = build_basis(g, 4)
    np.testing.assert_array_equal(B[:, 0], 1.0)
    assert np.all(np.abs(B) <= 1.0)
    pts = np.array([[1.0, -1.0], [0.5, 0.5]])
    B = build_basis(pts, 3)
    assert B[0, monomial_index(3, 2, 3)] == 1.0
    assert B[1, monomial_index(2, 1, 3)] == 0.125


def test_constant_and_linear_maps():
    g = make_grid(4, 5)
    B = build_basis(g, 2)
    c = np.zeros((2, 2, 3, 3))
    c[0, 0, 0, 0] = 1.0
    c[1, 1, 1, 0] = 1.0
    maps = sensitivity_maps(PolyCoefficients(c), B, (4, 5))
    np.testing.assert_array_equal(maps[0], 1 + 0j)
    np.testing.assert_array_equal(maps[1], 1j * g.coords[:, 0].reshape(4, 5))


def test_maps_match_brute_force():
    g = make_grid(4, 4)
    co = init_poly(2, 5, seed=1)
    co.coeffs[:] = np.random.default_rng(2).normal(size=co.coeffs.shape)
    maps = sensitivity_maps(co, build_basis(g, 5), (4, 4))
    np.testing.assert_allclose(maps, brute_force_maps(co.coeffs, g), atol=1e-12)


def test_maps_match_brute_force_nonsquare():
    g = make_grid(6, 3)
    co = init_poly(1, 15, seed=7)
    maps = sensitivity_maps(co, build_basis(g, 15), (6, 3))
    np.testing.assert_allclose(maps, brute_force_maps(co.coeffs, g), atol=1e-12)


def test_basis_mismatch_rejected():
    g = make_grid(4, 4)
    with pytest.raises(ShapeError):
        eval_sensitivities(init_poly(1, 3), build_basis(g, 2), (4, 4), Tape())


def test_smoothness_bound():
    d = 64
    g = make_grid(d, d)
    co = init_poly(2, 15, seed=3)
    co.coeffs[:] = np.random.default_rng(3).normal(size=co.coeffs.shape)
    maps = sensitivity_maps(co, build_basis(g, 15), (d, d))
    step = 2 / (d - 1)
    p = np.arange(16)
    for j in range(2):
        a = np.abs(co.coeffs[j, 0]) + np.abs(co.coeffs[j, 1])
        bound_x = np.sum(a * p[:, None]) * step
        bound_y = np.sum(a * p[None, :]) * step
        assert np.abs(np.diff(maps[j], axis=0)).max() <= bound_x
        assert np.abs(np.diff(maps[j], axis=1)).max() <= bound_y


def test_normalize_maps():
    out, bad = normalize_maps(np.full((1, 2, 2), 2 + 0j))
    np.testing.assert_allclose(out, 1 + 0j)
    assert bad == 0
    m = np.array([[[3.0]], [[3j]]])
    out, _ = normalize_maps(m)
    np.testing.assert_allclose(np.abs(out), 1 / np.sqrt(2))
    z = np.zeros((2, 2, 2), dtype=complex)
    z[:, 0, 0] = [1, 1j]
    out, bad = normalize_maps(z)
    assert bad == 3
    np.testing.assert_array_equal(out[:, 1, 1], 0)
    np.testing.assert_allclose(np.sum(np.abs(out[:, 0, 0]) ** 2), 1.0)
