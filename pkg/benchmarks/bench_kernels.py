"""Compare the compiled and pure-Python persistence kernels.

    python3 benchmarks/bench_kernels.py [--windows 500] [--length 128]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from tpkd import _kernels
from tpkd._kernels import _pure


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--windows", type=int, default=500)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)

    try:
        from tpkd._kernels import _fast
    except ImportError:
        print("compiled extension not built; only the pure-Python kernels are available")
        _fast = None

    rng = np.random.default_rng(0)
    signals = rng.normal(size=(args.windows, args.length)).cumsum(axis=1)
    centers = np.linspace(-3, 3, args.resolution), np.linspace(0, 6, args.resolution)
    pairs = [_pure.sublevel_pairs(s) for s in signals]

    backends = [("python", _pure)] + ([("cython", _fast)] if _fast else [])
    results = {}
    for name, mod in backends:
        t_pd = _best_of(lambda: [mod.sublevel_pairs(s) for s in signals], args.repeats)

        def raster():
            for b, d, _ in pairs:
                pers = np.asarray(d) - np.asarray(b)
                mod.rasterize(np.asarray(b), pers, np.ones_like(pers), 0.25, *centers)

        results[name] = (t_pd, _best_of(raster, args.repeats))

    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'backend':<8} {'diagram us/window':>18} {'raster us/window':>17}")
    for name, (a, b) in results.items():
        print(f"{name:<8} {a / args.windows * 1e6:>18.1f} {b / args.windows * 1e6:>17.1f}")
    if "cython" in results:
        (pa, pb), (ca, cb) = results["python"], results["cython"]
        print(f"speedup: diagram x{pa / ca:.1f}, raster x{pb / cb:.1f}")


if __name__ == "__main__":
    main()
