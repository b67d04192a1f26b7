"""Compare the compiled and numpy sampling kernels.

Usage: python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from slabrecon import kernels


def cases(n, rng):
    vol = rng.random((96, 96, 96, 3))
    valid = rng.random((96, 96, 96)) > 0.2
    img = rng.random((128, 128, 1))
    pts3 = rng.uniform(-1.05, 1.05, (n, 3))
    pts2 = rng.uniform(-1.05, 1.05, (n, 2))
    inv_lin = np.stack([np.eye(3) + 0.05 * rng.standard_normal((3, 3)) for _ in range(30)])
    inv_t = 0.05 * rng.standard_normal((30, 3))
    planes = np.linspace(-1, 1, 30)
    return {
        "nearest_index": lambda b: kernels.nearest_index(vol.shape[:3], pts3, backend=b),
        "trilinear": lambda b: kernels.trilinear(vol, pts3, backend=b),
        "trilinear_masked": lambda b: kernels.trilinear_masked(vol, valid, pts3, -2.0, backend=b),
        "bilinear": lambda b: kernels.bilinear(img, pts2, backend=b),
        "assign_slabs": lambda b: kernels.assign_slabs(pts3, inv_lin, inv_t, planes, 1 / 29,
                                                       backend=b),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"{args.n} points, best of {args.repeat}")
    print(f"{'kernel':18s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in cases(args.n, rng).items():
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends]
        row = f"{name:18s}" + "".join(f"{t * 1e3:10.1f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:9.1f}x"
            a, c = (fn(b) for b in backends)
            pairs = zip(a, c) if isinstance(a, tuple) else [(a, c)]
            same = all(np.array_equal(x, y) for x, y in pairs)
            row += "  identical" if same else "  DIFFER"
        print(row)
    if len(backends) == 1:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
