"""Reconstruction quality metrics on (H, W, C) arrays."""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

PSNR_CAP = 100.0


def psnr(pred, target, peak: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = (pred - target).ravel()
    mse = math.fsum(diff * diff) / diff.size  # exactly rounded sum
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_band(a, b, window, c1, c2):
    filt = lambda z: fftconvolve(z, window, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def ssim(pred, target, data_range: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (K1=0.01, K2=0.03, valid windows), per band then averaged."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[:, :, None], target[:, :, None]
    if min(pred.shape[:2]) < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} window")
    window = gaussian_window(window_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return float(np.mean([_ssim_band(pred[..., c], target[..., c], window, c1, c2) for c in range(pred.shape[2])]))


def roi_spectrum(cube, roi) -> np.ndarray:
    """Mean spectrum over ``roi = (row0, row1, col0, col1)`` (half-open)."""
    r0, r1, c0, c1 = roi
    patch = np.asarray(cube, dtype=np.float64)[r0:r1, c0:c1]
    if patch.size == 0:
        raise ValueError(f"empty ROI {roi}")
    return patch.reshape(-1, patch.shape[-1]).mean(axis=0)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        raise ValueError("correlation undefined for a constant curve")
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def spectral_correlation(pred, target, roi=None) -> float:
    """Pearson r between ROI-mean spectra (whole image when ``roi`` is None)."""
    pred = np.asarray(pred)
    if roi is None:
        roi = (0, pred.shape[0], 0, pred.shape[1])
    return pearson(roi_spectrum(pred, roi), roi_spectrum(target, roi))
