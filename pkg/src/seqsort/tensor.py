"""Numeric substrate: float32 arrays, seeded generators, shared error types.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 unless a
caller explicitly asks for float64, e.g. in gradient checks).
"""

from __future__ import annotations

import zlib

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf appears where finite values are required."""


class CacheError(RuntimeError):
    """Raised when backward is called without a cached forward pass."""


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Deterministic generator for ``seed`` and a path of sub-stream keys.

    String keys are hashed with CRC32 so that stream identity does not depend
    on Python's randomized ``hash``.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1
