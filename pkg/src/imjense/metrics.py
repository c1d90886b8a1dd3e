"""PSNR and SSIM on magnitude images."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

PSNR_FILE_CAP = 999.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    data_range: float
    window: int = SSIM_WINDOW
    sigma: float = SSIM_SIGMA
    k1: float = SSIM_K1
    k2: float = SSIM_K2


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test) -> float:
    """20 log10(max(ref) / RMSE); ``inf`` for identical images."""
    ref, test = _pair(ref, test)
    peak = ref.max()
    if not np.any(ref):
        raise ValueError("reference image is identically zero")
    rmse = math.sqrt(np.mean((ref - test) ** 2))
    if rmse == 0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(ref, test, data_range=None) -> float:
    """Mean SSIM over the valid (unpadded) region, Gaussian 11x11 window."""
    ref, test = _pair(ref, test)
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side, got {ref.shape}")
    L = ref.max() if data_range is None else data_range
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    w = gaussian_window()

    def filt(a):
        return convolve2d(a, w, mode="valid")

    mu1, mu2 = filt(ref), filt(test)
    s11 = filt(ref * ref) - mu1 * mu1
    s22 = filt(test * test) - mu2 * mu2
    s12 = filt(ref * test) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def evaluate(ref, test) -> MetricReport:
    ref, test = _pair(np.abs(ref), np.abs(test))
    return MetricReport(psnr(ref, test), ssim(ref, test), float(ref.max()))


CSV_FIELDS = ("case", "R", "ACS", "variant", "psnr_db", "ssim", "seconds")


def write_metrics_csv(path, rows) -> None:
    """Rows are dicts with the ``CSV_FIELDS`` keys; infinite PSNR is capped for the file."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows:
            row = dict(row)
            if row.get("psnr_db") is not None and not math.isfinite(row["psnr_db"]):
                row["psnr_db"] = PSNR_FILE_CAP
            w.writerow({k: row.get(k, "") for k in CSV_FIELDS})


def report_dict(report: MetricReport) -> dict:
    return asdict(report)
