"""Kernel backend selection.

The compiled extension is preferred. Set ``SEQSORT_PURE_PYTHON=1`` to force
the numpy fallback (useful for benchmarking and for platforms without a C
compiler).
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SEQSORT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in x_shape), kh, kw, stride, pad)


def maxpool_forward(x, k, stride):
    return _impl.maxpool_forward(_c(x), k, stride)


def maxpool_backward(dout, argmax, x_shape):
    return _impl.maxpool_backward(_c(dout), _c(argmax), tuple(int(s) for s in x_shape))


def bilinear_warp(img, u, v):
    img = _c(img)
    return _impl.bilinear_warp(img, _c(u.astype(img.dtype, copy=False)), _c(v.astype(img.dtype, copy=False)))


def lk_residual_sums(i0, ix, iy, i1, u, v, radius):
    dt = i0.dtype
    args = [_c(a.astype(dt, copy=False)) for a in (i0, ix, iy, i1, u, v)]
    return _impl.lk_residual_sums(*args, radius)
