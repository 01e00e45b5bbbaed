"""Benchmark the numba and pure-numpy paths of each hot kernel.

The per-kernel defaults in envid._kernels._AUTO were chosen from this
script's output on a single core. Run it after touching a kernel:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 9 --batch 16
"""

import argparse
import math
import os
import time
from contextlib import contextmanager

import numpy as np

from envid import _kernels as K


@contextmanager
def backend(name):
    old = os.environ.get("ENVID_BACKEND")
    os.environ["ENVID_BACKEND"] = name
    try:
        yield
    finally:
        if old is None:
            os.environ.pop("ENVID_BACKEND", None)
        else:
            os.environ["ENVID_BACKEND"] = old


def best_of(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _time_both(run, repeats):
    out = {}
    for name in ("numba", "numpy"):
        with backend(name):
            run()  # warm-up: JIT compile / page in
            out[name] = best_of(run, repeats)
    return out


def bench_ism(repeats):
    # mid-size lecture room, ~0.5 s of tail at 16 kHz
    args = ((10.0, 5.0, 3.0), (5.8, 2.9, 1.5), (2.0, 1.5, 1.7),
            math.sqrt(1.0 - 0.3), 16000.0, 343.0, 8000, 1e-4, 0.5)

    def run():
        K.ism_render(*args)

    return _time_both(run, repeats)


def bench_conv(repeats, batch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 16, 48, 138)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    dy = rng.standard_normal((batch, 32, 48, 138)).astype(np.float32)

    def run():
        K.conv2d_forward(x, w)
        K.conv2d_backward(x, w, dy)

    return _time_both(run, repeats)


def bench_pool(repeats, batch):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 32, 48, 138)).astype(np.float32)

    def run():
        y, idx = K.maxpool2_forward(x)
        K.maxpool2_backward(idx, np.ascontiguousarray(y), 48, 138)

    return _time_both(run, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats, best is reported")
    ap.add_argument("--batch", type=int, default=8,
                    help="batch size for conv/pool shapes")
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba is not importable: both columns run the numpy path")

    results = {
        "ism_render (0.5 s AIR)": bench_ism(args.repeats),
        f"conv2d fwd+bwd ({args.batch}x16x48x138)": bench_conv(args.repeats,
                                                               args.batch),
        f"maxpool2 fwd+bwd ({args.batch}x32x48x138)": bench_pool(args.repeats,
                                                                 args.batch),
    }

    width = max(len(k) for k in results)
    print(f"{'kernel':<{width}}  {'numba':>9}  {'numpy':>9}  numpy/numba")
    for name, t in results.items():
        ratio = t["numpy"] / t["numba"]
        print(f"{name:<{width}}  {t['numba']:>8.4f}s  {t['numpy']:>8.4f}s  "
              f"{ratio:>10.2f}x")
    print(f"\nshipped defaults: {K._AUTO} (override with ENVID_BACKEND)")


if __name__ == "__main__":
    main()
