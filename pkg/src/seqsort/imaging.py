"""Small image utilities shared by the synthesizer and the flow estimator."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = (0.299, 0.587, 0.114)


def luminance(img: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) -> (..., H, W) using fixed Rec.601 weights."""
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).astype(img.dtype, copy=False)


def separable_filter(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Filter the last two axes with the same 1-d kernel (reflected borders)."""
    r = len(k) // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img, pad, mode="reflect")
    k = k.astype(img.dtype)
    p = sliding_window_view(p, len(k), axis=-1) @ k
    p = sliding_window_view(p, len(k), axis=-2) @ k
    return p


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return separable_filter(img, gaussian_kernel(sigma))


def box_sum(img: np.ndarray, size: int) -> np.ndarray:
    return separable_filter(img, np.ones(size))


def smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean, unit-std band-limited noise texture."""
    n = gaussian_blur(rng.standard_normal(shape), sigma)
    n -= n.mean()
    return n / (n.std() + 1e-12)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values to the 8-bit grid (as float32)."""
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
