# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im, max-pool, bilinear warp.

Loop orders mirror ``_pykernels`` so both backends accumulate in the same
sequence.
"""

import numpy as np
from libc.math cimport floor

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, y, xx
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    out[row, col] = x[b, ch, y, xx]
                                else:
                                    out[row, col] = 0
                                col = col + 1
    return out_arr


def col2im(real[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, oy, ox, ch, i, j, y, xx, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= y < h and 0 <= xx < w:
                                    dx[b, ch, y, xx] += cols[row, col]
                                col = col + 1
    return dx_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, y, xx, best_idx
    cdef real best, val
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        y = oy * stride
                        xx = ox * stride
                        best = x[b, ch, y, xx]
                        best_idx = y * w + xx
                        for i in range(k):
                            for j in range(k):
                                val = x[b, ch, y + i, xx + j]
                                if val > best:
                                    best = val
                                    best_idx = (y + i) * w + xx + j
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool_backward(real[:, :, :, ::1] dout, long long[:, :, :, ::1] argmax, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, oy, ox
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        dx[b, ch, argmax[b, ch, oy, ox]] += dout[b, ch, oy, ox]
    return dx_arr.reshape(n, c, h, w)


def bilinear_warp(real[:, ::1] img, real[:, ::1] u, real[:, ::1] v):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((h, w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t y, x, x0, y0, x1, y1
    cdef real sx, sy, fx, fy, top, bot
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = x + u[y, x]
                sy = y + v[y, x]
                if sx < 0:
                    sx = 0
                elif sx > w - 1:
                    sx = w - 1
                if sy < 0:
                    sy = 0
                elif sy > h - 1:
                    sy = h - 1
                x0 = <Py_ssize_t>sx
                y0 = <Py_ssize_t>sy
                if w > 1 and x0 > w - 2:
                    x0 = w - 2
                if h > 1 and y0 > h - 2:
                    y0 = h - 2
                fx = sx - x0
                fy = sy - y0
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
                bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
                out[y, x] = top * (1 - fy) + bot * fy
    return out_arr


def lk_residual_sums(real[:, ::1] i0, real[:, ::1] ix, real[:, ::1] iy, real[:, ::1] i1,
                     real[:, ::1] u, real[:, ::1] v, int radius):
    cdef Py_ssize_t h = i0.shape[0], w = i0.shape[1]
    dtype = np.float32 if real is float else np.float64
    bx_arr = np.zeros((h, w), dtype=dtype)
    by_arr = np.zeros((h, w), dtype=dtype)
    cdef real[:, ::1] bx = bx_arr
    cdef real[:, ::1] by = by_arr
    cdef Py_ssize_t y, x, oy, ox, qy, qx, x0, y0, x1, y1
    cdef real sx, sy, fx, fy, top, bot, it, up, vp, ax, ay, w00, w01, w10, w11
    cdef Py_ssize_t fu, fv
    with nogil:
        for y in range(h):
            for x in range(w):
                up = u[y, x]
                vp = v[y, x]
                ax = 0
                ay = 0
                # fast path: window and its displaced samples all inside the frame
                fu = <Py_ssize_t>floor(up)
                fv = <Py_ssize_t>floor(vp)
                if (x - radius >= 0 and x + radius < w and y - radius >= 0 and y + radius < h
                        and x - radius + fu >= 0 and x + radius + fu + 1 < w
                        and y - radius + fv >= 0 and y + radius + fv + 1 < h):
                    fx = up - fu
                    fy = vp - fv
                    w00 = (1 - fx) * (1 - fy)
                    w01 = fx * (1 - fy)
                    w10 = (1 - fx) * fy
                    w11 = fx * fy
                    for oy in range(-radius, radius + 1):
                        qy = y + oy
                        y0 = qy + fv
                        for ox in range(-radius, radius + 1):
                            qx = x + ox
                            x0 = qx + fu
                            it = (i1[y0, x0] * w00 + i1[y0, x0 + 1] * w01
                                  + i1[y0 + 1, x0] * w10 + i1[y0 + 1, x0 + 1] * w11 - i0[qy, qx])
                            ax = ax + ix[qy, qx] * it
                            ay = ay + iy[qy, qx] * it
                    bx[y, x] = ax
                    by[y, x] = ay
                    continue
                for oy in range(-radius, radius + 1):
                    qy = y + oy
                    if qy < 0:
                        qy = 0
                    elif qy > h - 1:
                        qy = h - 1
                    for ox in range(-radius, radius + 1):
                        qx = x + ox
                        if qx < 0:
                            qx = 0
                        elif qx > w - 1:
                            qx = w - 1
                        sx = qx + up
                        sy = qy + vp
                        if sx < 0:
                            sx = 0
                        elif sx > w - 1:
                            sx = w - 1
                        if sy < 0:
                            sy = 0
                        elif sy > h - 1:
                            sy = h - 1
                        x0 = <Py_ssize_t>sx
                        y0 = <Py_ssize_t>sy
                        if w > 1 and x0 > w - 2:
                            x0 = w - 2
                        if h > 1 and y0 > h - 2:
                            y0 = h - 2
                        fx = sx - x0
                        fy = sy - y0
                        x1 = x0 + 1 if x0 + 1 < w else w - 1
                        y1 = y0 + 1 if y0 + 1 < h else h - 1
                        top = i1[y0, x0] * (1 - fx) + i1[y0, x1] * fx
                        bot = i1[y1, x0] * (1 - fx) + i1[y1, x1] * fx
                        it = top * (1 - fy) + bot * fy - i0[qy, qx]
                        ax = ax + ix[qy, qx] * it
                        ay = ay + iy[qy, qx] * it
                bx[y, x] = ax
                by[y, x] = ay
    return bx_arr, by_arr
