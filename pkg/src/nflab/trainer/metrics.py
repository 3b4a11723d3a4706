"""Image quality metrics: PSNR and single-scale SSIM.

SSIM uses an 11x11 gaussian window (sigma 1.5), weighted moments without
sample-covariance correction, constants k1=0.01 and k2=0.03, and averages
the index map over valid (fully interior) windows only. Color images are
reduced to luminance by the channel mean before comparison.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(a: np.ndarray, b: np.ndarray,
        mask: np.ndarray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:mask.ndim]:
            raise ShapeError(
                f"mask {mask.shape} does not cover image {a.shape}")
        sq = sq[mask]
        if sq.size == 0:
            raise ShapeError("mask selects no pixels")
    return float(sq.mean())


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
         data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    m = mse(a, b, mask)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / m)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return g[:, None] * g[None, :]


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=-1)
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected [H, W] or [H, W, C], got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully interior windows."""
    ga, gb = _luminance(a), _luminance(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise ShapeError(
            f"images must be at least {SSIM_WINDOW} pixels on each side "
            f"for SSIM, got {ga.shape}")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    wa = np.lib.stride_tricks.sliding_window_view(ga, win.shape)
    wb = np.lib.stride_tricks.sliding_window_view(gb, win.shape)
    mu_a = np.einsum("hwij,ij->hw", wa, win)
    mu_b = np.einsum("hwij,ij->hw", wb, win)
    ex_aa = np.einsum("hwij,ij->hw", wa * wa, win)
    ex_bb = np.einsum("hwij,ij->hw", wb * wb, win)
    ex_ab = np.einsum("hwij,ij->hw", wa * wb, win)
    var_a = ex_aa - mu_a ** 2
    var_b = ex_bb - mu_b ** 2
    cov = ex_ab - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
