"""Pure-numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``SEQSORT_PURE_PYTHON=1`` is set. Summation order matches the compiled
versions so the two backends agree bit-for-bit on float32 inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return win.reshape(n * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    # reverse kernel order == ascending output position per input element,
    # the accumulation order of the compiled kernel
    for i in reversed(range(kh)):
        ys = slice(i, i + stride * oh, stride)
        for j in reversed(range(kw)):
            xs = slice(j, j + stride * ow, stride)
            dxp[:, :, ys, xs] += cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def maxpool_forward(x, k, stride):
    """Max over k*k windows; argmax is the flat index into the H*W plane.

    Ties resolve to the first maximum in row-major window order, which is
    also the lowest flat index.
    """
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(n, c, oh, ow, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(n, c, oh, ow, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[:, None] * stride + local // k
    ox = np.arange(ow)[None, :] * stride + local % k
    return np.ascontiguousarray(out), (oy * w + ox).astype(np.int64)


def maxpool_backward(dout, argmax, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w), dtype=dout.dtype)
    rows = np.repeat(np.arange(n * c), dout.shape[2] * dout.shape[3])
    np.add.at(dx, (rows, argmax.reshape(-1)), dout.reshape(-1))
    return dx.reshape(n, c, h, w)


def bilinear_warp(img, u, v):
    """Sample ``img`` at (y + v, x + u) with edge clamping."""
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=img.dtype), np.arange(w, dtype=img.dtype), indexing="ij")
    sx = np.clip(xx + u, 0, w - 1)
    sy = np.clip(yy + v, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(sx, dtype=np.int64)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(sy, dtype=np.int64)
    fx = sx - x0.astype(img.dtype)
    fy = sy - y0.astype(img.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype, copy=False)


def lk_residual_sums(i0, ix, iy, i1, u, v, radius):
    """Window sums of Ix*It and Iy*It where each pixel's window is sampled
    in ``i1`` at that pixel's own displacement (u, v).

    Window positions are clamped to the frame.
    """
    h, w = i0.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    bx = np.zeros((h, w), i0.dtype)
    by = np.zeros((h, w), i0.dtype)
    for oy in range(-radius, radius + 1):
        qy = np.clip(yy + oy, 0, h - 1)
        for ox in range(-radius, radius + 1):
            qx = np.clip(xx + ox, 0, w - 1)
            sx = np.clip(qx.astype(i0.dtype) + u, 0, w - 1)
            sy = np.clip(qy.astype(i0.dtype) + v, 0, h - 1)
            x0 = np.minimum(np.floor(sx).astype(np.int64), max(w - 2, 0))
            y0 = np.minimum(np.floor(sy).astype(np.int64), max(h - 2, 0))
            fx = sx - x0.astype(i0.dtype)
            fy = sy - y0.astype(i0.dtype)
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            top = i1[y0, x0] * (1 - fx) + i1[y0, x1] * fx
            bot = i1[y1, x0] * (1 - fx) + i1[y1, x1] * fx
            it = top * (1 - fy) + bot * fy - i0[qy, qx]
            bx += ix[qy, qx] * it
            by += iy[qy, qx] * it
    return bx, by
