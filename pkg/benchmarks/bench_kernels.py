"""Time the compiled conv kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes are those met during GAN, ViT-teacher and DETR training. Both
backends are checked for equal output before timing.
"""
import argparse
import timeit

import numpy as np

from dfkd.engine import _kernels_py

try:
    from dfkd.engine import _ckernels
except ImportError:
    _ckernels = None

CASES = [
    # (name, input shape, kernel, stride, padding)
    ("gan disc conv1", (32, 2, 16, 16), 4, 2, 1),
    ("gan disc conv2", (32, 32, 8, 8), 4, 2, 1),
    ("feature extractor conv1", (256, 1, 16, 16), 3, 1, 1),
    ("detr backbone", (16, 16, 32, 48), 3, 2, 1),
]


def bench(fn, *args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':26s} {'op':7s} {'numpy ms':>9s} {'cython ms':>10s} {'speedup':>8s}")
    for name, shape, k, s, p in CASES:
        x = rng.normal(size=shape)
        cols = _kernels_py.im2col(x, k, s, p)
        ops = [("im2col", "im2col", (x, k, s, p)), ("col2im", "col2im", (cols, shape, k, s, p))]
        for label, attr, a in ops:
            t_py = bench(getattr(_kernels_py, attr), *a, repeat=args.repeat)
            if _ckernels is None:
                print(f"{name:26s} {label:7s} {t_py:9.3f} {'n/a':>10s} {'-':>8s}")
                continue
            fast = getattr(_ckernels, attr)
            if not np.array_equal(fast(*a), getattr(_kernels_py, attr)(*a)):
                raise SystemExit(f"{name} {label}: backends disagree")
            t_c = bench(fast, *a, repeat=args.repeat)
            print(f"{name:26s} {label:7s} {t_py:9.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
