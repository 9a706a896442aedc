"""Warm timings of the path and flag kernels, numba against the numpy fallback.

    python benchmarks/bench_kernels.py [--trials 200000] [--n 3] [--relays 100]
"""

import argparse
import time

import numpy as np

from onionkey import _kernels as K


def timed(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200_000)
    ap.add_argument("--n", type=int, default=3)
    ap.add_argument("--relays", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    u = rng.random((args.trials, args.n, 6))
    pins = rng.random((args.trials, 2))
    mask = np.arange(args.relays) < args.relays // 3
    weights = {"unit": np.ones(args.relays), "weighted": rng.uniform(0.5, 10.0, args.relays)}
    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    circuits = args.trials * args.n

    print(f"trials={args.trials} n={args.n} relays={args.relays} (best of {args.repeat}, warm)")
    print(f"{'kernel':<8} {'weights':<9} " + " ".join(f"{b:>12}" for b in backends) + "   speedup")
    for kernel in ("paths", "flags"):
        for label, w in weights.items():
            secs = {}
            for b in backends:
                if kernel == "paths":
                    secs[b] = timed(lambda: K.sample_paths(w, u, pins, backend=b), args.repeat)
                else:
                    secs[b] = timed(lambda: K.observe_flags(w, mask, u, pins, backend=b), args.repeat)
            cells = " ".join(f"{secs[b] * 1e3:>9.1f} ms" for b in backends)
            speed = f"{secs['numpy'] / secs['numba']:8.1f}x" if "numba" in secs else "       -"
            print(f"{kernel:<8} {label:<9} {cells} {speed}   ({circuits / min(secs.values()) / 1e6:.1f} M circuits/s)")


if __name__ == "__main__":
    main()
