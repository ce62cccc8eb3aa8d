"""Time the compiled and numpy kernel backends on matching-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--size 256] [--depths 64] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from sweepmatch import _kernels_py
from sweepmatch.kernels import compiled_backend

DIRECTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def sgm_case(backend, cost):
    def run():
        acc = np.zeros_like(cost)
        for dy, dx in DIRECTIONS:
            backend.sgm_path(cost, dy, dx, 0.03, 0.3, acc)
        return acc

    return run


def gather_case(backend, values, valid, xs, ys):
    return lambda: backend.bilinear_gather(values, valid, xs, ys)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="image side in pixels")
    ap.add_argument("--depths", type=int, default=64, help="depth hypotheses in the SGM volume")
    ap.add_argument("--channels", type=int, default=25, help="feature channels for the gather")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    s = args.size
    cost = rng.random((s, s, args.depths))
    values = rng.normal(size=(s, s, args.channels))
    valid = (rng.random((s, s)) > 0.05).astype(np.uint8)
    xs = rng.uniform(-2, s + 1, s * s)
    ys = rng.uniform(-2, s + 1, s * s)

    backends = [("python", _kernels_py)]
    if compiled_backend is not None:
        backends.append(("cython", compiled_backend))
    else:
        print("compiled extension not built; timing the numpy backend only")

    cases = {
        f"sgm 8 directions {s}x{s}x{args.depths}": lambda b: sgm_case(b, cost),
        f"bilinear gather {s * s} samples x {args.channels} ch": lambda b: gather_case(b, values, valid, xs, ys),
    }
    print(f"{'kernel':44s} {'backend':8s} {'best (s)':>10s} {'speed-up':>9s}")
    for name, make in cases.items():
        base = None
        for label, backend in backends:
            best = min(timeit.repeat(make(backend), number=1, repeat=args.repeat))
            base = base or best
            print(f"{name:44s} {label:8s} {best:10.4f} {base / best:8.1f}x")


if __name__ == "__main__":
    main()
