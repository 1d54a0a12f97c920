"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints median wall time per call for each kernel and input size.  The
``FLEETSIM_NUMBA`` flag only picks the default backend; both are timed here.
"""
import argparse
import statistics
import time

import numpy as np

from fleetsim import _kernels as k


def bench(fn, args, repeat):
    fn(*args)  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not k.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    cases = []
    for n in (512, 8192, 131072):
        toks = rng.integers(0, 32000, n)
        cases.append(("chain_hashes", n, k.chain_hashes_numpy, k.chain_hashes_numba, (toks, 16)))
    for n in (1000, 100000, 1000000):
        xs = rng.exponential(1.0, n)
        cases.append(("nearest_rank", n, k.nearest_rank_numpy, k.nearest_rank_numba, (xs, 99.0)))
    print(f"default backend: {k.BACKEND}")
    print(f"{'kernel':<14}{'n':>9}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>9}")
    for name, n, f_np, f_nb, a in cases:
        t_np = bench(f_np, a, args.repeat)
        t_nb = bench(f_nb, a, args.repeat)
        print(f"{name:<14}{n:>9}{t_np * 1e6:>14.1f}{t_nb * 1e6:>14.1f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
