"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel median wall time for both backends, their speed ratio, and
the max absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from seqsort import _pykernels

try:
    from seqsort import _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((256, 16, 16, 16)).astype(np.float32)
    cols = _pykernels.im2col(x, 3, 3, 1, 1)
    dcols = rng.standard_normal(cols.shape).astype(np.float32)
    pooled, arg = _pykernels.maxpool_forward(x, 2, 2)
    dpool = rng.standard_normal(pooled.shape).astype(np.float32)
    img = rng.random((64, 64)).astype(np.float32)
    u = rng.uniform(-2, 2, img.shape).astype(np.float32)
    v = rng.uniform(-2, 2, img.shape).astype(np.float32)
    ix, iy, i1 = (rng.standard_normal(img.shape).astype(np.float32) for _ in range(3))
    return {
        "im2col 256x16x16x16 k3": ("im2col", (x, 3, 3, 1, 1)),
        "col2im 256x16x16x16 k3": ("col2im", (dcols, x.shape, 3, 3, 1, 1)),
        "maxpool_forward 2x2": ("maxpool_forward", (x, 2, 2)),
        "maxpool_backward 2x2": ("maxpool_backward", (dpool, arg, x.shape)),
        "bilinear_warp 64x64": ("bilinear_warp", (img, u, v)),
        "lk_residual_sums 64x64 r2": ("lk_residual_sums", (img, ix, iy, i1, u, v, 2)),
    }


def timeit(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (fn, a) in cases(rng).items():
        py, cy = getattr(_pykernels, fn), getattr(_ckernels, fn)
        tp, tc = timeit(py, a, args.repeat), timeit(cy, a, args.repeat)
        diff = float(np.max(np.abs(np.asarray(_first(py(*a)), np.float64) - _first(cy(*a)))))
        print(f"{name:30s} {1e3 * tp:10.3f} {1e3 * tc:10.3f} {tp / tc:7.1f}x {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
