"""Binary file formats.

KSPC (multi-coil k-space), all little-endian::

    b"KSPC" | version u16 | coils u16 | d1 u32 | d2 u32 | n_lines u32
    | n_lines x u32 kept line (centered indexing, ascending)
    | coils*d1*d2 x (re f32, im f32)   samples in C order, FFT order (DC at 0,0)

IMJW (trained model checkpoint), all little-endian::

    b"IMJW" | version u16 | activation u8 (0 sine, 1 relu) | precision u8 (4 or 8)
    | pe_bands u16 | w0 f64 | d1 u32 | d2 u32 | n_layers u32
    | n_layers x (fan_out u32, fan_in u32)
    | coils u32 | order u32
    | real branch: per layer W (fan_out*fan_in f64, row-major) then b (fan_out f64)
    | imag branch: same
    | coefficients coils*2*(order+1)^2 f64  (coil, part, p, q) C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .coilmodel import PolyCoefficients
from .inr import InrParameters
from .mrop import KSpaceVolume, SamplingMask

KSPC_MAGIC = b"KSPC"
KSPC_VERSION = 1
IMJW_MAGIC = b"IMJW"
IMJW_VERSION = 1
_ACTIVATIONS = ("sine", "relu")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated at offset {self.pos}: expected {self.pos + n} bytes, "
                f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes after offset {self.pos}")


# -- KSPC -------------------------------------------------------------------

def kspc_bytes(volume: KSpaceVolume) -> bytes:
    c, d1, d2 = volume.data.shape
    lines = volume.mask.kept_lines
    head = KSPC_MAGIC + struct.pack("<HHIII", KSPC_VERSION, c, d1, d2, len(lines))
    body = np.asarray(lines, dtype="<u4").tobytes()
    samples = np.empty((c, d1, d2, 2), dtype="<f4")
    samples[..., 0] = volume.data.real
    samples[..., 1] = volume.data.imag
    return head + body + samples.tobytes()


def write_kspc(path, volume: KSpaceVolume) -> None:
    Path(path).write_bytes(kspc_bytes(volume))


def parse_kspc(buf: bytes, what="KSPC") -> KSpaceVolume:
    r = _Reader(buf, what)
    magic = r.take(4)
    if magic != KSPC_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r} at offset 0, expected {KSPC_MAGIC!r}")
    (version,) = r.unpack("H")
    if version != KSPC_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    c, d1, d2, n = r.unpack("HIII")
    lines = r.array("u4", n)
    raw = r.array("f4", 2 * c * d1 * d2).reshape(c, d1, d2, 2)
    r.finish()
    # assign parts directly: re + 1j*im would turn -0.0 into +0.0
    data = np.empty((c, d1, d2), dtype=np.complex128)
    data.real = raw[..., 0]
    data.imag = raw[..., 1]
    return KSpaceVolume(data, SamplingMask(d1, d2, tuple(int(k) for k in lines)))


def read_kspc(path) -> KSpaceVolume:
    return parse_kspc(Path(path).read_bytes(), what=str(path))


# -- IMJW checkpoint --------------------------------------------------------

def write_checkpoint(path, params: InrParameters, coeffs: PolyCoefficients, grid_shape) -> None:
    sizes = params.sizes
    layers = list(zip(sizes[1:], sizes[:-1]))
    out = [IMJW_MAGIC, struct.pack("<HBBHdIII", IMJW_VERSION, _ACTIVATIONS.index(params.activation),
                                   params.dtype.itemsize, params.pe_bands, params.w0,
                                   grid_shape[0], grid_shape[1], len(layers))]
    out += [struct.pack("<II", fo, fi) for fo, fi in layers]
    out.append(struct.pack("<II", coeffs.n_coils, coeffs.order))
    for a in params.arrays():
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    out.append(np.ascontiguousarray(coeffs.coeffs, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path):
    """Returns ``(params, coeffs, (d1, d2))`` in the precision the model was trained in."""
    r = _Reader(Path(path).read_bytes(), str(path))
    magic = r.take(4)
    if magic != IMJW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {IMJW_MAGIC!r}")
    version, act, prec, pe_bands, w0, d1, d2, n_layers = r.unpack("HBBHdIII")
    if version != IMJW_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if act >= len(_ACTIVATIONS) or prec not in (4, 8):
        raise FormatError(f"{path}: bad activation/precision code ({act}, {prec}) at offset 6")
    dtype = np.float32 if prec == 4 else np.float64
    dims = [r.unpack("II") for _ in range(n_layers)]
    n_coils, order = r.unpack("II")
    branches = []
    for _ in range(2):
        layers = []
        for fo, fi in dims:
            w = r.array("f8", fo * fi).reshape(fo, fi).astype(dtype)
            b = r.array("f8", fo).astype(dtype)
            layers.append((w, b))
        branches.append(layers)
    k = order + 1
    coeffs = r.array("f8", n_coils * 2 * k * k).reshape(n_coils, 2, k, k).astype(dtype)
    r.finish()
    params = InrParameters(tuple(branches), _ACTIVATIONS[act], w0, pe_bands)
    return params, PolyCoefficients(coeffs), (d1, d2)


# -- images -----------------------------------------------------------------

def write_pgm16(path, image: np.ndarray, vmin=None, vmax=None) -> None:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples), linearly scaled."""
    img = np.asarray(image, dtype=np.float64)
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.round((img - lo) * scale), 0, 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = parts[4]
    return np.frombuffer(data[: 2 * w * h], dtype=">u2").reshape(h, w).astype(np.uint16)


def write_raw_f32(path, array: np.ndarray) -> None:
    """Raw little-endian float32; complex input is written as interleaved (re, im)."""
    a = np.asarray(array)
    if np.iscomplexobj(a):
        a = np.stack([a.real, a.imag], axis=-1)
    Path(path).write_bytes(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_raw_f32(path, shape, complex_data=False) -> np.ndarray:
    buf = Path(path).read_bytes()
    n = int(np.prod(shape)) * (2 if complex_data else 1)
    if len(buf) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} bytes for shape {tuple(shape)}, file has {len(buf)}")
    a = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    if complex_data:
        a = a.reshape(tuple(shape) + (2,))
        z = np.empty(tuple(shape), dtype=np.complex128)
        z.real = a[..., 0]
        z.imag = a[..., 1]
        return z
    return a.reshape(shape)
