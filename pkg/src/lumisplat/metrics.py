"""Image quality metrics: PSNR and windowed SSIM."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

from .errors import ParameterError

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at the 99 dB sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels.

    Images smaller than the window fall back to a single whole-image window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    h, w = a.shape[:2]
    if min(h, w) < 11:
        window = np.full((h, w), 1.0 / (h * w))
    else:
        window = _gaussian_window()

    vals = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = convolve(x, window, mode="nearest")
        mu_y = convolve(y, window, mode="nearest")
        xx = convolve(x * x, window, mode="nearest") - mu_x * mu_x
        yy = convolve(y * y, window, mode="nearest") - mu_y * mu_y
        xy = convolve(x * y, window, mode="nearest") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        )
        vals.append(float(np.mean(s)))
    return float(np.mean(vals))
