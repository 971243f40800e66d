"""Reconstruction quality: normalised l2 error, 3D SSIM and PSNR."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .volume import as_array

__all__ = ["MetricReport", "l2_error", "ssim3", "psnr", "evaluate", "SSIM_WINDOW", "SSIM_SIGMA"]

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    l2_normalized: float
    ssim: float
    psnr: float
    ssim_window: int = SSIM_WINDOW
    ssim_sigma: float = SSIM_SIGMA

    def to_json(self) -> dict:
        return asdict(self)


def _pair(u, u0):
    a = np.asarray(as_array(u), dtype=np.float64)
    b = np.asarray(as_array(u0), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def l2_error(u, u0) -> float:
    """``|u - u0| / |u0|``."""
    a, b = _pair(u, u0)
    ref = np.linalg.norm(b)
    if ref == 0:
        raise ValueError("reference volume has zero norm")
    return float(np.linalg.norm(a - b) / ref)


def _dynamic_range(u0) -> float:
    dr = float(u0.max() - u0.min())
    return dr if dr > 0 else 1.0


def _window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _local_mean(x, g, r):
    for ax in range(3):
        x = correlate1d(x, g, axis=ax, mode="constant")
    return x[r:-r, r:-r, r:-r] if r else x


def ssim3(u, u0, window: int = SSIM_WINDOW, dynamic_range: Optional[float] = None,
          sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM over the voxels whose Gaussian window fits entirely.

    ``dynamic_range`` defaults to ``max(u0) - min(u0)``.
    """
    a, b = _pair(u, u0)
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and at least 3")
    if min(a.shape) < window:
        raise ValueError(f"volume {a.shape} is smaller than the {window}^3 window")
    dr = _dynamic_range(b) if dynamic_range is None else float(dynamic_range)
    c1, c2 = (K1 * dr) ** 2, (K2 * dr) ** 2
    g = _window(window, sigma)
    r = window // 2
    mu_a = _local_mean(a, g, r)
    mu_b = _local_mean(b, g, r)
    saa = _local_mean(a * a, g, r) - mu_a * mu_a
    sbb = _local_mean(b * b, g, r) - mu_b * mu_b
    sab = _local_mean(a * b, g, r) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def psnr(u, u0, dynamic_range: Optional[float] = None) -> float:
    a, b = _pair(u, u0)
    dr = _dynamic_range(b) if dynamic_range is None else float(dynamic_range)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else float(10 * np.log10(dr * dr / mse))


def evaluate(u, u0) -> MetricReport:
    return MetricReport(l2_error(u, u0), ssim3(u, u0), psnr(u, u0))
