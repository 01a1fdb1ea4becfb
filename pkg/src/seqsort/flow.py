"""Pyramidal Lucas-Kanade optical flow and motion statistics over regions.

Fixed settings: 3 pyramid levels (2x downscale, binomial pre-blur), 5x5
integration window, 3 warp iterations per level. Statistics ignore a border
margin of ``(window // 2) * 2**(levels - 1)`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .imaging import luminance, separable_filter
from .tensor import ShapeError

LEVELS = 3
WINDOW = 5
ITERATIONS = 3
MIN_EIGEN = 1e-6
_BINOMIAL = np.array([1, 4, 6, 4, 1], np.float64) / 16


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    margin: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u * self.u + self.v * self.v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def valid_mask(self) -> np.ndarray:
        h, w = self.shape
        m = np.zeros((h, w), bool)
        k = self.margin
        m[k:h - k, k:w - k] = True
        return m

    def interior(self, a: np.ndarray) -> np.ndarray:
        k = self.margin
        return a[k:a.shape[0] - k, k:a.shape[1] - k]


def default_margin(levels: int = LEVELS, window: int = WINDOW) -> int:
    return (window // 2) * 2 ** (levels - 1)


def _gray(f: np.ndarray) -> np.ndarray:
    if f.ndim == 3:
        f = luminance(f)
    if f.ndim != 2:
        raise ShapeError(f"expected a (H, W) or (3, H, W) frame, got {f.shape}")
    return f.astype(np.float32)


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(separable_filter(pyr[-1], _BINOMIAL)[::2, ::2].astype(np.float32))
    return pyr


def _upsample(a, shape):
    up = np.repeat(np.repeat(a, 2, axis=0), 2, axis=1) * 2
    out = np.zeros(shape, a.dtype)
    h, w = min(shape[0], up.shape[0]), min(shape[1], up.shape[1])
    out[:h, :w] = up[:h, :w]
    return out


def _window_sum(a, window):
    # clamped window positions, matching kernels.lk_residual_sums
    r = window // 2
    p = np.pad(a, r, mode="edge")
    h, w = a.shape
    out = np.zeros_like(a)
    for oy in range(window):
        for ox in range(window):
            out += p[oy:oy + h, ox:ox + w]
    return out


def estimate_flow(f0: np.ndarray, f1: np.ndarray, levels: int = LEVELS, window: int = WINDOW,
                  iterations: int = ITERATIONS) -> FlowField:
    """Dense displacement (u, v) such that ``f1(x + u, y + v) ~= f0(x, y)``."""
    f0, f1 = _gray(f0), _gray(f1)
    if f0.shape != f1.shape:
        raise ShapeError(f"frame shapes differ: {f0.shape} vs {f1.shape}")
    p0, p1 = _pyramid(f0, levels), _pyramid(f1, levels)
    u = np.zeros(p0[-1].shape, np.float32)
    v = np.zeros_like(u)
    for lvl in range(levels - 1, -1, -1):
        i0, i1 = p0[lvl], p1[lvl]
        if u.shape != i0.shape:
            u, v = _upsample(u, i0.shape), _upsample(v, i0.shape)
        iy, ix = (g.astype(np.float32) for g in np.gradient(i0))
        sxx = _window_sum(ix * ix, window)
        sxy = _window_sum(ix * iy, window)
        syy = _window_sum(iy * iy, window)
        det = sxx * syy - sxy * sxy
        half_tr = 0.5 * (sxx + syy)
        lam_min = half_tr - np.sqrt(np.maximum(half_tr * half_tr - det, 0))
        ok = lam_min > MIN_EIGEN
        safe = np.where(ok, det, 1.0)
        for _ in range(iterations):
            bx, by = kernels.lk_residual_sums(i0, ix, iy, i1, u, v, window // 2)
            du = -(syy * bx - sxy * by) / safe
            dv = -(sxx * by - sxy * bx) / safe
            u = (u + np.where(ok, du, 0)).astype(np.float32)
            v = (v + np.where(ok, dv, 0)).astype(np.float32)
    return FlowField(u, v, default_margin(levels, window))


def clip_flows(frames: np.ndarray) -> list[FlowField]:
    """Flow between each pair of consecutive frames of a (T, 3, H, W) clip."""
    gray = luminance(frames)
    return [estimate_flow(gray[t], gray[t + 1]) for t in range(len(gray) - 1)]


def _region_slices(region, shape):
    x, y, w, h = (int(r) for r in region)
    if w <= 0 or h <= 0:
        raise ValueError(f"empty region {region}")
    if x < 0 or y < 0 or x + w > shape[1] or y + h > shape[0]:
        raise ValueError(f"region {region} outside frame {shape}")
    return slice(y, y + h), slice(x, x + w)


def _region_mean(field: FlowField, a: np.ndarray, region) -> float:
    sl = _region_slices(region, a.shape)
    valid = field.valid_mask()[sl]
    if not valid.any():
        return 0.0
    return float(a[sl][valid].mean())


def patch_motion_score(flows: list[FlowField], region) -> float:
    """Sum over intervals of the mean flow magnitude inside ``region`` (x, y, w, h)."""
    if not flows:
        raise ValueError("no flow fields given")
    return sum(_region_mean(f, f.magnitude, region) for f in flows)


def direction_consistency(flows: list[FlowField], region, cone_deg: float = 45.0,
                          min_flow: float = 0.1) -> bool:
    """True iff every interval's mean flow direction lies within ``cone_deg`` of their common mean.

    An interval whose mean flow is shorter than ``min_flow`` px has no direction
    and makes the tuple inconsistent.
    """
    if not flows:
        raise ValueError("no flow fields given")
    dirs = []
    for f in flows:
        mu = np.array([_region_mean(f, f.u, region), _region_mean(f, f.v, region)])
        norm = np.hypot(*mu)
        if norm < min_flow:
            return False
        dirs.append(mu / norm)
    dirs = np.array(dirs)
    mean = dirs.mean(axis=0)
    mnorm = np.hypot(*mean)
    if mnorm < 1e-9:
        return False
    cos = dirs @ (mean / mnorm)
    return bool(np.all(cos >= np.cos(np.deg2rad(cone_deg)) - 1e-12))


def window_scores(mags: np.ndarray, margin: int, size: int, stride: int):
    """Mean magnitude of every ``size`` x ``size`` window, for a stack of maps.

    ``mags`` is (K, H, W); returns ``(scores (K, ny, nx), xs, ys)`` where window
    (iy, ix) has top-left corner ``(xs[ix], ys[iy])``. Border pixels inside
    ``margin`` are excluded from each mean, matching ``patch_motion_score``.
    """
    k, h, w = mags.shape
    valid = np.zeros((h, w), np.float64)
    valid[margin:h - margin, margin:w - margin] = 1
    ys = np.arange(0, h - size + 1, stride)
    xs = np.arange(0, w - size + 1, stride)

    def integral(a):
        s = np.zeros(a.shape[:-2] + (h + 1, w + 1))
        s[..., 1:, 1:] = a.cumsum(-2).cumsum(-1)
        return s

    def windows(s):
        return (s[..., ys[:, None] + size, xs[None, :] + size] - s[..., ys[:, None], xs[None, :] + size]
                - s[..., ys[:, None] + size, xs[None, :]] + s[..., ys[:, None], xs[None, :]])

    total = windows(integral(mags.astype(np.float64) * valid))
    count = windows(integral(valid))
    scores = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return scores, xs, ys


def magnitude_to_u8(mag: np.ndarray, scale: float | None = None) -> np.ndarray:
    scale = float(mag.max()) if scale is None else scale
    if scale <= 0:
        return np.zeros(mag.shape, np.uint8)
    return np.round(np.clip(mag / scale, 0, 1) * 255).astype(np.uint8)
