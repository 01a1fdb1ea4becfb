"""Central finite-difference gradient checks for layers and whole models.

Checks run in float64 so that the finite-difference error (O(h^2) truncation
plus rounding) stays far below the tolerance; the analytic backward code is
dtype-generic, so this validates the float32 path's formulas as well.

Central differences are only meaningful where the function is smooth on
[v - h, v + h]. ReLU and max-pool make the network piecewise smooth, so each
probe compares the activation pattern (ReLU masks, pool argmaxes) at
``v +- h`` with the one at ``v`` and replaces coordinates whose interval
straddles a kink.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Layer, MaxPool, Param, ReLU
from .tensor import make_rng


def rel_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def to_float64(params: dict[str, Param]) -> None:
    for p in params.values():
        p.value = p.value.astype(np.float64)
        p.grad = np.zeros_like(p.value)


def iter_layers(root):
    """Every leaf layer reachable from a model, Sequential, layer or list of them."""
    if isinstance(root, (list, tuple)):
        for r in root:
            yield from iter_layers(r)
    elif hasattr(root, "layers"):
        for _, layer in root.layers:
            yield from iter_layers(layer)
    elif isinstance(root, Layer):
        yield root
    elif hasattr(root, "__dict__"):
        for v in vars(root).values():
            if isinstance(v, (Layer, list, tuple)) or hasattr(v, "layers"):
                yield from iter_layers(v)


def activation_pattern(layers) -> list[np.ndarray]:
    """ReLU masks and pool argmaxes cached by the most recent forward pass."""
    out = []
    for layer in layers:
        if isinstance(layer, ReLU) and layer._cache is not None:
            out.append(layer._cache > 0)
        elif isinstance(layer, MaxPool) and layer._cache is not None:
            out.append(layer._cache[0])
    return out


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(f, arr, c, h, layers, base):
    old = arr[c]
    arr[c] = old + h
    fp = f()
    ok = not layers or _same(base, activation_pattern(layers))
    arr[c] = old - h
    fm = f()
    ok = ok and (not layers or _same(base, activation_pattern(layers)))
    arr[c] = old
    return (fp - fm) / (2 * h), ok


def ridders(f, arr, c, h0: float, layers=(), base=None, con: float = 1.4, ntab: int = 10,
            max_shrink: int = 4) -> tuple[float, float, bool]:
    """Ridders' extrapolated central difference of ``f`` w.r.t. ``arr[c]``.

    Starts from the largest step in ``h0, h0/10, ...`` whose interval keeps
    the activation pattern, then shrinks by ``con`` while extrapolating.
    Returns (estimate, error estimate, smooth).
    """
    h = h0
    for _ in range(max_shrink + 1):
        d0, ok = _central(f, arr, c, h, layers, base)
        if ok:
            break
        h /= 10
    else:
        return 0.0, float("inf"), False
    con2 = con * con
    prev = [d0]
    best, err = d0, float("inf")
    for i in range(1, ntab):
        h /= con
        cur = [_central(f, arr, c, h, layers, base)[0]]
        fac = con2
        for j in range(1, i + 1):
            cur.append((cur[j - 1] * fac - prev[j - 1]) / (fac - 1))
            fac *= con2
            e = max(abs(cur[j] - cur[j - 1]), abs(cur[j] - prev[j - 1]))
            if e <= err:
                err, best = e, cur[j]
        if abs(cur[i] - prev[i - 1]) >= 2 * err:
            break
        prev = cur
    return best, err, True


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float, layers=()) -> tuple[np.ndarray, np.ndarray]:
    """Ridders estimates at ``coords`` and a mask of coordinates probed without crossing a kink."""
    layers = list(layers)
    base = None
    if layers:
        f()
        base = activation_pattern(layers)
    out = np.zeros(len(coords))
    smooth = np.zeros(len(coords), bool)
    for k, c in enumerate(coords):
        out[k], _, smooth[k] = ridders(f, arr, c, h, layers, base)
    return out, smooth


def _compare(analytic: np.ndarray, f, arr, rng, count, h, layers) -> float:
    """Relative error over up to ``count`` kink-free coordinates."""
    idx = rng.choice(arr.size, size=min(count, arr.size), replace=False)
    cs = [np.unravel_index(i, arr.shape) for i in idx]
    num, smooth = numeric_grad(f, arr, cs, h, layers)
    if not smooth.any():
        raise RuntimeError("every probed coordinate straddles a non-differentiable point")
    return max(rel_error(analytic[c], g) for c, g, ok in zip(cs, num, smooth) if ok)


def check_gradients(forward: Callable[[np.ndarray], np.ndarray], backward: Callable[[np.ndarray], np.ndarray | None],
                    x: np.ndarray, params: dict[str, Param], seed: int = 0, coords: int = 24,
                    h: float = 1e-3, check_input: bool = True, layers=()) -> dict[str, float]:
    """Compare backward against central differences of ``sum(forward(x) * R)``.

    ``forward`` must be deterministic (fixed dropout masks). Returns the max
    relative error per checked tensor, keyed ``"x"`` and by parameter name.
    """
    rng = make_rng(seed, "gradcheck")
    R = rng.standard_normal(forward(x).shape)

    def loss() -> float:
        return float(np.sum(forward(x) * R))

    for p in params.values():
        p.grad[...] = 0
    forward(x)
    dx = backward(R.copy())
    errors = {}
    if check_input and dx is not None:
        errors["x"] = _compare(dx, loss, x, rng, coords, h, layers)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for k, p in params.items():
        errors[k] = _compare(analytic[k], loss, p.value, rng, coords, h, layers)
    return errors


def check_layer(layer, x: np.ndarray, seed: int = 0, coords: int = 24, h: float = 1e-3) -> dict[str, float]:
    """Gradient check of a single layer in train mode (fixed dropout stream)."""
    params = layer.params()
    to_float64(params)
    x = x.astype(np.float64)

    def fwd(inp):
        return layer.forward(inp, train=True, rng=make_rng(seed, "mask"))

    return check_gradients(fwd, layer.backward, x, params, seed, coords, h,
                           check_input=getattr(layer, "input_grad", True), layers=list(iter_layers(layer)))


def check_model(model, x: np.ndarray, labels: np.ndarray, seed: int = 0, coords: int = 12,
                h: float = 1e-3) -> dict[str, float]:
    """Check every parameter of an ``OrderNet``-like model against its cross-entropy loss."""
    from .ops import softmax_cross_entropy

    params = model.params()
    to_float64(params)
    x = x.astype(np.float64)
    rng = make_rng(seed, "gradcheck-model")

    def loss() -> float:
        logits = model.forward(x, train=True, rng=make_rng(seed, "mask"))
        return softmax_cross_entropy(logits, labels)[0]

    model.zero_grad()
    logits = model.forward(x, train=True, rng=make_rng(seed, "mask"))
    _, d = softmax_cross_entropy(logits, labels)
    model.backward(d)
    layers = list(iter_layers(model))
    analytic = {k: p.grad.copy() for k, p in params.items()}
    return {k: _compare(analytic[k], loss, p.value, rng, coords, h, layers) for k, p in params.items()}
