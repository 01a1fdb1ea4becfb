"""Forward/backward kernels for each layer kind.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache. Kernels preserve the input dtype.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import CacheError, ShapeError, conv_out_size

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _need(cache, name):
    if cache is None:
        raise CacheError(f"{name}: backward called without a cached forward pass")
    return cache


def conv2d_forward(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {cw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(wd, kw, stride, pad)
    cols = kernels.im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(f, -1).T
    out += b
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, w, stride, pad)


def conv2d_backward(dout, cache, input_grad=True):
    cols, x_shape, w, stride, pad = _need(cache, "conv2d")
    f, c, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not input_grad:
        return None, dw, db
    dcols = d2 @ w.reshape(f, -1)
    dx = kernels.col2im(dcols, x_shape, kh, kw, stride, pad)
    return dx, dw, db


def fc_forward(x, w, b):
    """Fully connected layer; ``w`` is (in, out)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fc: input {x.shape} incompatible with weights {w.shape}")
    return x @ w + b, (x, w)


def fc_backward(dout, cache):
    x, w = _need(cache, "fc")
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, cache):
    mask = _need(cache, "relu")
    return dout * mask


def pool_forward(x, k=2, stride=2):
    if x.ndim != 4:
        raise ShapeError(f"pool expects 4-d input, got {x.shape}")
    conv_out_size(x.shape[2], k, stride, 0)
    conv_out_size(x.shape[3], k, stride, 0)
    out, arg = kernels.maxpool_forward(x, k, stride)
    return out, (arg, x.shape)


def pool_backward(dout, cache):
    arg, x_shape = _need(cache, "pool")
    return kernels.maxpool_backward(dout, arg, x_shape)


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``m*running + (1-m)*batch``
    (biased batch variance). In eval mode the running statistics are used.
    """
    axes, bshape = _bn_axes(x)
    if train:
        count = x.size // x.shape[1]
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
        return out.astype(x.dtype, copy=False), (xhat, inv, gamma, count, True)
    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    xhat = (x - running_mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv, gamma, 0, False)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, count, train = _need(cache, "batchnorm")
    axes, bshape = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = (gamma * inv).reshape(bshape)
    if not train:
        return dout * g, dgamma, dbeta
    dx = g * (dout - (dbeta / count).reshape(bshape) - xhat * (dgamma / count).reshape(bshape))
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def dropout_forward(x, p, rng, train):
    if not train or p <= 0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * keep, keep


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = e / s
    grad[rows, labels] -= 1
    grad /= n
    return float(loss), grad.astype(logits.dtype, copy=False)
