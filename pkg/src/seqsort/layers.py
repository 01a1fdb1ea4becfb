"""Stateful layers: parameters, cached forward state, and gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import DTYPE, CacheError


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> dict[str, Param]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise CacheError(f"{self.kind}: backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, c_in, c_out, k, stride=1, pad=0, rng=None, input_grad=True):
        super().__init__()
        self.stride, self.pad = stride, pad
        # first layers skip dx: nothing upstream consumes it
        self.input_grad = input_grad
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        self.w = Param(w.astype(DTYPE))
        self.b = Param(np.zeros(c_out, DTYPE))

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.conv2d_forward(x, self.w.value, self.b.value, self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = ops.conv2d_backward(dout, self._take_cache(), self.input_grad)
        self.w.grad += dw
        self.b.grad += db
        return dx


class Linear(Layer):
    kind = "fc"

    def __init__(self, n_in, n_out, rng=None, std=None):
        super().__init__()
        scale = np.sqrt(2.0 / n_in) if std is None else std
        self.w = Param((rng.standard_normal((n_in, n_out)) * scale).astype(DTYPE))
        self.b = Param(np.zeros(n_out, DTYPE))

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.fc_forward(x, self.w.value, self.b.value)
        return out

    def backward(self, dout):
        dx, dw, db = ops.fc_backward(dout, self._take_cache())
        self.w.grad += dw
        self.b.grad += db
        return dx


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels):
        super().__init__()
        self.gamma = Param(np.ones(channels, DTYPE))
        self.beta = Param(np.zeros(channels, DTYPE))
        self.running_mean = np.zeros(channels, DTYPE)
        self.running_var = np.ones(channels, DTYPE)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train
        )
        return out

    def backward(self, dout):
        dx, dg, db = ops.batchnorm_backward(dout, self._take_cache())
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(dout, self._take_cache())


class MaxPool(Layer):
    kind = "pool"

    def __init__(self, k=2, stride=2):
        super().__init__()
        self.k, self.stride = k, stride

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.pool_forward(x, self.k, self.stride)
        return out

    def backward(self, dout):
        return ops.pool_backward(dout, self._take_cache())


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5):
        super().__init__()
        self.p = p

    def forward(self, x, train=False, rng=None):
        out, mask = ops.dropout_forward(x, self.p, rng, train)
        self._cache = (mask,)
        return out

    def backward(self, dout):
        (mask,) = self._take_cache()
        return ops.dropout_backward(dout, mask)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


class Sequential(Layer):
    kind = "seq"

    def __init__(self, named_layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = named_layers

    def params(self):
        out = {}
        for name, layer in self.layers:
            for pname, p in layer.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def buffers(self):
        out = {}
        for name, layer in self.layers:
            for bname, b in layer.buffers().items():
                out[f"{name}.{bname}"] = b
        return out

    def forward(self, x, train=False, rng=None):
        for _, layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout


class ZeroPad(Layer):
    """Asymmetric zero padding (top, bottom, left, right)."""

    kind = "pad"

    def __init__(self, top, bottom, left, right):
        super().__init__()
        self.pads = (top, bottom, left, right)

    def forward(self, x, train=False, rng=None):
        t, b, l, r = self.pads
        self._cache = x.shape
        return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))

    def backward(self, dout):
        shape = self._take_cache()
        t, _, l, _ = self.pads
        return np.ascontiguousarray(dout[:, :, t:t + shape[2], l:l + shape[3]])
