"""Time the numba and pure-numpy kernel paths on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are also checked for identical results. The active path in the
library is chosen at import time by FRACSED_DISABLE_NUMBA.
"""
import argparse
import time

import numpy as np

from fracsed import kernels
from fracsed._jit import HAVE_NUMBA


def cases(rng):
    x = rng.normal(size=(32, 16, 16, 8))
    a = rng.integers(-127, 128, size=(32, 16, 16, 8))
    w = rng.integers(-7, 8, size=(32, 16, 3, 3))
    plane = rng.integers(0, 2, size=(32, 16, 3, 3)).astype(np.uint8)
    cols = kernels.NUMPY_KERNELS["im2col"](x, 3, 3, 2, 2, 2)
    return {
        "im2col": (x, 3, 3, 2, 2, 2),
        "col2im": (cols, x.shape, 3, 3, 2, 2, 2),
        "int_conv2d": (a, w, 2, 2, 2),
        "plane_conv2d": (a, plane, 2, 2, 2),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    opts = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
        return
    args_by_kernel = cases(np.random.default_rng(0))
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, args in args_by_kernel.items():
        np_fn, nb_fn = kernels.NUMPY_KERNELS[name], kernels.NUMBA_KERNELS[name]
        # first call compiles (or loads the cache)
        assert np.array_equal(np_fn(*args), nb_fn(*args)), f"{name}: paths disagree"
        t_np = best_of(np_fn, args, opts.repeat)
        t_nb = best_of(nb_fn, args, opts.repeat)
        print(f"{name:<14}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
