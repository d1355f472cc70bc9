"""PSNR and SSIM on the BT.601 luma channel, dynamic range 1.0."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of a ``3 x H x W`` image in [0, 1]."""
    r, g, b = img[0], img[1], img[2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def _prepare(a, b, y_channel: bool) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[0] == 1:
        a, b = a[0], b[0]
    elif a.ndim == 3 and y_channel:
        a, b = rgb_to_y(a), rgb_to_y(b)
    return a, b


def shave(img: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return img
    return img[..., border:-border, border:-border]


def psnr(a, b, shave_border: int = 0, y_channel: bool = True) -> float:
    """``10 log10(1 / MSE)`` after shaving ``shave_border`` pixels; identical inputs give 100 dB.

    Three-channel inputs are compared on luma unless ``y_channel`` is False.
    Single-channel inputs are used as they are.
    """
    a, b = _prepare(a, b, y_channel)
    a, b = shave(a, shave_border), shave(b, shave_border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, (k, k)), win)


def ssim(a, b, y_channel: bool = True, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM over all fully-contained Gaussian windows."""
    a, b = _prepare(a, b, y_channel)
    if a.ndim != 2:
        raise ValueError("ssim expects a single channel after conversion")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    win = gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
