"""Post-training reconstruction: k-space consistency, coil images, adaptive combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .coilmodel import PolyCoefficients, build_basis, normalize_maps, sensitivity_maps
from .coords import make_dense_grid, make_grid
from .inr import InrParameters, render
from .mrop import KSpaceVolume, SamplingMask, adjoint_model, fft2c, ifft2c, kspace_consistency
from .tensorgrad import ShapeError

WALSH_WINDOW = 5
WALSH_POWER_ITERS = 10


@dataclass
class ReconResult:
    combined: np.ndarray      # (d1, d2) complex
    coil_images: np.ndarray   # (c, d1, d2) complex
    sens_maps: np.ndarray     # (c, d1, d2) complex, raw polynomial maps
    network_image: np.ndarray # (d1, d2) complex, pure network output
    kspace: KSpaceVolume      # composite (or predicted, without consistency)
    metrics: object = None


def coil_combine(coil_images: np.ndarray, window: int = WALSH_WINDOW, iters: int = WALSH_POWER_ITERS) -> np.ndarray:
    """Adaptive (Walsh) combination.

    Per pixel: average x x^H over a ``window`` x ``window`` neighbourhood
    (edges replicated), take the dominant eigenvector v by power iteration
    from e_1, rotate v so its first nonzero entry is real positive, and
    return v^H x.
    """
    x = np.asarray(coil_images)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"expected (coils, d1, d2), got {x.shape}")
    c = x.shape[0]
    outer = x[:, None] * np.conj(x[None, :])  # (c, c, d1, d2)
    cov = np.empty_like(outer)
    for i in range(c):
        for j in range(c):
            cov[i, j] = (uniform_filter(outer[i, j].real, window, mode="nearest")
                         + 1j * uniform_filter(outer[i, j].imag, window, mode="nearest"))
    cov = np.moveaxis(cov, (0, 1), (-2, -1))  # (d1, d2, c, c)

    v = np.zeros(x.shape[1:] + (c,), dtype=cov.dtype)
    v[..., 0] = 1.0
    for _ in range(iters):
        v = np.einsum("...ij,...j->...i", cov, v)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        v = np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)

    mag = np.abs(v)
    first = np.argmax(mag > 0, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)
    lead_mag = np.abs(lead)
    rot = np.divide(np.conj(lead), lead_mag, out=np.zeros_like(lead), where=lead_mag > 0)
    v = v * rot
    return np.einsum("...i,i...->...", np.conj(v), x)


def predict_kspace(params: InrParameters, coeffs: PolyCoefficients, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unmasked per-coil prediction F(C_j I); returns (kspace, image, maps)."""
    d1, d2 = shape
    grid = make_grid(d1, d2)
    image = render(params, grid)
    maps = sensitivity_maps(coeffs, build_basis(grid, coeffs.order), shape)
    return fft2c(maps * image), image, maps


def reconstruct(params: InrParameters, coeffs: PolyCoefficients, measured: KSpaceVolume,
                use_kc: bool = True) -> ReconResult:
    if coeffs.n_coils != measured.n_coils:
        raise ShapeError(f"model has {coeffs.n_coils} coils, data has {measured.n_coils}")
    pred, image, maps = predict_kspace(params, coeffs, measured.shape)
    if use_kc:
        composite = kspace_consistency(pred.astype(np.complex128), measured)
    else:
        composite = KSpaceVolume(pred, SamplingMask.full(*measured.shape))
    coil_imgs = ifft2c(composite.data)
    return ReconResult(coil_combine(coil_imgs), coil_imgs, maps, image, composite)


def query_upsampled(params: InrParameters, scale: int, base_shape) -> np.ndarray:
    """Network image on a grid ``scale`` times denser per axis (no k-space consistency)."""
    d1, d2 = base_shape
    return render(params, make_dense_grid(d1, d2, scale))


def reference_image(full_kspace: np.ndarray) -> np.ndarray:
    """Adaptive combination of fully sampled coil data: the evaluation reference."""
    return coil_combine(ifft2c(full_kspace))


def zero_filled(measured: KSpaceVolume, sens: np.ndarray) -> np.ndarray:
    """Adjoint reconstruction with RSS-normalized maps."""
    maps, _ = normalize_maps(sens)
    return adjoint_model(measured, maps)
