"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The first numba call compiles (or loads the on-disk cache); it is excluded
from the timings and reported separately.
"""
import argparse
import time
import timeit

import numpy as np

from hallulrp import _kernels as k


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = {
        "ab_ratios 30x64x256": (lambda: rng.normal(size=(30, 64, 256)), "ab"),
        "ab_ratios 1x256x64": (lambda: rng.normal(size=(1, 256, 64)), "ab"),
        "auc n=2000": (lambda: (np.round(rng.normal(size=2000), 2), rng.random(2000) < 0.5), "auc"),
    }
    print(f"numba available: {k.HAS_NUMBA}")
    print(f"{'case':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (make, kind) in cases.items():
        data = make()
        if kind == "ab":
            np_fn = lambda: k.ab_ratios_numpy(data, 1.0, 0.0, 1e-9)
            nb_fn = lambda: k.ab_ratios_numba(data, 1.0, 0.0, 1e-9)
        else:
            np_fn = lambda: k.mann_whitney_auc_numpy(*data)
            nb_fn = lambda: k.mann_whitney_auc_numba(*data)
        t_np = _best(np_fn, args.repeat) * 1e3
        if not k.HAS_NUMBA:
            print(f"{name:<24}{t_np:>10.3f}{'-':>10}{'-':>9}")
            continue
        start = time.perf_counter()
        nb_fn()
        first = (time.perf_counter() - start) * 1e3
        t_nb = _best(nb_fn, args.repeat) * 1e3
        print(f"{name:<24}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x   (first call {first:.0f} ms)")


if __name__ == "__main__":
    main()
