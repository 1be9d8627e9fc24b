"""Image quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 120.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; capped at PSNR_CAP_DB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1; channels averaged, mean over valid windows."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    w = _gaussian_window()
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = convolve2d(x, w, mode="valid")
        mu_y = convolve2d(y, w, mode="valid")
        var_x = convolve2d(x * x, w, mode="valid") - mu_x ** 2
        var_y = convolve2d(y * y, w, mode="valid") - mu_y ** 2
        cov = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)
             / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))
        vals.append(np.mean(s))
    return float(np.mean(vals))
