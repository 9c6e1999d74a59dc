"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best-of-``repeat`` wall time per call for both
backends, their ratio, and whether the outputs are bitwise equal.
"""

import argparse
import timeit

import numpy as np

from falconlab import _kernels_py as py_backend

try:
    from falconlab import _ckernels as c_backend
except ImportError:  # pragma: no cover
    c_backend = None


def cases(rng):
    x = np.ascontiguousarray(rng.standard_normal((128, 6, 28, 28)))
    cols = py_backend.im2col(x, 5, 5, 1, 2)
    pooled, argmax = py_backend.maxpool_forward(x, 2)
    grad = np.ascontiguousarray(rng.standard_normal(pooled.shape))
    images = np.ascontiguousarray(rng.random((1000, 28, 28)))
    t = np.radians(30.0)
    matrix = np.array([[np.cos(t), -np.sin(t), 8.0], [np.sin(t), np.cos(t), -5.0]])
    return {
        "im2col 128x6x28x28 k5": lambda k: k.im2col(x, 5, 5, 1, 2),
        "col2im 128x6x28x28 k5": lambda k: k.col2im(cols, x.shape, 5, 5, 1, 2),
        "maxpool fwd 128x6x28x28": lambda k: k.maxpool_forward(x, 2),
        "maxpool bwd 128x6x28x28": lambda k: k.maxpool_backward(grad, argmax, x.shape, 2),
        "warp bilinear 1000x28x28": lambda k: k.warp_bilinear(images, matrix),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if c_backend is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(py_backend), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(c_backend), number=1, repeat=args.repeat))
        print(f"{name:28s} {t_py * 1e3:10.2f} {t_c * 1e3:10.2f} {t_py / t_c:8.1f}x  {_same(fn(py_backend), fn(c_backend))}")


if __name__ == "__main__":
    main()
