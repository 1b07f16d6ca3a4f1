"""Time the compiled and numpy Floyd-Steinberg kernels on CIFAR-sized planes.

    python3 benchmarks/bench_dither.py --images 64 --repeat 3
"""
import argparse
import time

import numpy as np

from tforge import kernels


def bench(backend, planes, levels, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = kernels.floyd_steinberg(planes, levels, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=int, default=64)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--depth", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    planes = rng.random((args.images * 3, args.size, args.size))
    levels = 2 ** args.depth
    backends = ["python"]
    try:
        from tforge import _dither  # noqa: F401

        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy fallback only")
    results = {}
    for b in backends:
        results[b] = bench(b, planes, levels, args.repeat)
        print(f"{b:>7}: {results[b][0] * 1e3:9.2f} ms for {len(planes)} planes of {args.size}x{args.size}")
    if len(results) == 2:
        diff = np.abs(results["cython"][1] - results["python"][1]).max()
        print(f"speedup {results['python'][0] / results['cython'][0]:.1f}x, max abs difference {diff:.3g}")


if __name__ == "__main__":
    main()
