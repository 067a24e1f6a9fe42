"""PSNR and SSIM on the luminance channel, computed at a 255 dynamic range."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

__all__ = ["MetricReport", "psnr", "ssim"]

_L = 255.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    border_shave: int

    def row(self, image: str, method: str, factor: int) -> list:
        return [image, method, factor, f"{self.psnr:.4f}", f"{self.ssim:.6f}"]


def _shaved(a: np.ndarray, b: np.ndarray, shave: int):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if shave < 0 or 2 * shave >= min(a.shape):
        raise ValueError(f"shave {shave} too large for images of shape {a.shape}")
    if shave:
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    return a * _L, b * _L


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    x, y = _shaved(a, b, shave)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(_L * _L / mse)


def _ssim_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window."""
    x, y = _shaved(a, b, shave)
    if min(x.shape) < _SSIM_WINDOW:
        raise ValueError(f"images too small for an {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    w = _ssim_window()
    c1 = (_K1 * _L) ** 2
    c2 = (_K2 * _L) ** 2

    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, w, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def report(a: np.ndarray, b: np.ndarray, shave: int = 0) -> MetricReport:
    """Convenience wrapper computing both measures with one shave setting."""
    return MetricReport(psnr=psnr(a, b, shave), ssim=ssim(a, b, shave), border_shave=shave)
