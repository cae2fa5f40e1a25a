"""Compare the compiled and numpy depthwise 3x3 kernels.

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import timeit

import numpy as np

from ivtune import _pykernels

try:
    from ivtune import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(8, 4, 8, 8), (8, 16, 8, 8), (32, 16, 16, 16), (8, 64, 32, 32)]


def bench(mod, x, k, b, g, repeat):
    fwd = min(timeit.repeat(lambda: mod.dwconv3x3_forward(x, k, b), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.dwconv3x3_backward(x, k, g), number=1, repeat=repeat))
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'shape':>18} {'dtype':>8} {'py fwd us':>10} {'c fwd us':>10} "
          f"{'py bwd us':>10} {'c bwd us':>10}")
    for shape in SHAPES:
        for dtype in (np.float32, np.float64):
            x = rng.normal(size=shape).astype(dtype)
            k = rng.normal(size=(shape[1], 3, 3)).astype(dtype)
            b = rng.normal(size=shape[1]).astype(dtype)
            g = rng.normal(size=shape).astype(dtype)
            py = bench(_pykernels, x, k, b, g, args.repeat)
            c = bench(_ckernels, x, k, b, g, args.repeat) if _ckernels else (float("nan"),) * 2
            print(f"{str(shape):>18} {np.dtype(dtype).name:>8} {py[0]*1e6:10.1f} {c[0]*1e6:10.1f} "
                  f"{py[1]*1e6:10.1f} {c[1]*1e6:10.1f}")


if __name__ == "__main__":
    main()
