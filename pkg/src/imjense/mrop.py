"""Cartesian multi-coil MR operators.

k-space arrays are stored in FFT order (DC at index (0, 0)). Sampling masks
name their phase-encode lines in centered (fftshifted) order, where the DC
line sits at index d2 // 2; ``centered_to_fft`` and ``fft_to_centered``
convert between the two.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorgrad import ShapeError, Tape


def centered_to_fft(lines, n: int) -> np.ndarray:
    return (np.asarray(lines, dtype=np.int64) - n // 2) % n


def fft_to_centered(lines, n: int) -> np.ndarray:
    return (np.asarray(lines, dtype=np.int64) + n // 2) % n


def fft2c(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D FFT over the last two axes."""
    return np.fft.fft2(x, norm="ortho")


def ifft2c(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(x, norm="ortho")


@dataclass(frozen=True)
class SamplingMask:
    """Phase-encode lines kept along the second axis, in centered indexing."""

    d1: int
    d2: int
    kept_lines: tuple[int, ...]

    def __post_init__(self):
        lines = tuple(sorted(set(int(k) for k in self.kept_lines)))
        if lines and (lines[0] < 0 or lines[-1] >= self.d2):
            raise ValueError(f"kept lines must lie in [0, {self.d2}), got {lines[0]}..{lines[-1]}")
        object.__setattr__(self, "kept_lines", lines)

    @classmethod
    def full(cls, d1: int, d2: int) -> "SamplingMask":
        return cls(d1, d2, tuple(range(d2)))

    @property
    def shape(self):
        return (self.d1, self.d2)

    def fft_lines(self) -> np.ndarray:
        return np.sort(centered_to_fft(self.kept_lines, self.d2))

    def matrix(self) -> np.ndarray:
        """Binary (d1, d2) mask in FFT order."""
        m = np.zeros((self.d1, self.d2), dtype=bool)
        m[:, self.fft_lines()] = True
        return m

    def rate(self) -> float:
        return len(self.kept_lines) / self.d2


@dataclass
class KSpaceVolume:
    data: np.ndarray  # (c, d1, d2) complex, FFT order
    mask: SamplingMask

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1:] != self.mask.shape:
            raise ShapeError(f"k-space {self.data.shape} does not match mask {self.mask.shape}")

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]


def apply_mask(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    return x * mask.matrix()


def forward_model(image: int, sens: int, mask: SamplingMask | None, tape: Tape) -> int:
    """Per-coil M F (C_j I) on ``tape``.

    ``image`` is a (2, d1, d2) node and ``sens`` a (2, c, d1, d2) node; the
    result has shape (2, c, d1, d2). ``mask=None`` skips the sampling step.
    """
    iv, sv = tape.value(image), tape.value(sens)
    if iv.ndim != 3 or sv.ndim != 4 or iv.shape[1:] != sv.shape[2:]:
        raise ShapeError(f"image {iv.shape} and sensitivities {sv.shape} disagree")
    img = tape.reshape(image, (2, 1) + iv.shape[1:])
    k = tape.fft2(tape.cmul(img, sens))
    if mask is not None:
        if mask.shape != iv.shape[1:]:
            raise ShapeError(f"mask {mask.shape} does not match image {iv.shape[1:]}")
        k = tape.mask(k, mask.matrix().astype(iv.dtype))
    return k


def forward_op(image: np.ndarray, sens: np.ndarray, mask: SamplingMask | None) -> np.ndarray:
    """Complex-array version of :func:`forward_model` (no gradient tracking)."""
    tape = Tape()
    dtype = np.float32 if image.dtype == np.complex64 else np.float64
    img = tape.const(np.stack([image.real, image.imag]).astype(dtype))
    s = tape.const(np.stack([sens.real, sens.imag]).astype(dtype))
    v = tape.value(forward_model(img, s, mask, tape))
    return v[0] + 1j * v[1]


def adjoint_model(kspace: KSpaceVolume, sens: np.ndarray) -> np.ndarray:
    """sum_j conj(C_j) * F^-1(M S_j)."""
    if sens.shape != kspace.data.shape:
        raise ShapeError(f"sensitivities {sens.shape} do not match k-space {kspace.data.shape}")
    coil_imgs = ifft2c(apply_mask(kspace.data, kspace.mask))
    return np.sum(np.conj(sens) * coil_imgs, axis=0)


def kspace_consistency(predicted: KSpaceVolume | np.ndarray, measured: KSpaceVolume) -> KSpaceVolume:
    """Replace predicted samples on acquired lines by the measurements, bit for bit."""
    if isinstance(predicted, KSpaceVolume):
        if predicted.mask != measured.mask and predicted.mask.kept_lines != tuple(range(measured.mask.d2)):
            raise ShapeError("predicted and measured k-space carry different masks")
        pred = predicted.data
    else:
        pred = np.asarray(predicted)
    if pred.shape != measured.data.shape:
        raise ShapeError(f"predicted {pred.shape} vs measured {measured.data.shape}")
    dtype = np.result_type(pred.dtype, measured.data.dtype)
    out = np.where(measured.mask.matrix(), measured.data.astype(dtype), pred.astype(dtype))
    return KSpaceVolume(out, measured.mask)
