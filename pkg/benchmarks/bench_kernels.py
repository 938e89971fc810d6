"""Benchmark the numba kernels against the pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--reps N]

Times each hot kernel on shapes the desk-scale trainer actually hits
(B*H = 32 attention mats of 64x64, hidden states of 512x128) and prints
the per-call ratio. Run once with a warm numba cache for honest numbers.
"""

import argparse
import time

import numpy as np

from entlab import kernels as K


def bench(fn, args, reps):
    fn(*args)  # warm (and, for numba, compile)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    N, T, d = 32, 64, 128
    z = rng.normal(size=(N, T, T))
    t = rng.uniform(0.5, 2.0, size=(N, T))
    du = rng.normal(size=(N, T, T))
    x = rng.normal(size=(512, d))
    g = rng.normal(size=d)
    b = rng.normal(size=d)
    dy = rng.normal(size=(512, d))
    # gelu kernels take flat arrays (callers reshape around them)
    h = rng.normal(size=512 * 4 * d)
    dh = rng.normal(size=512 * 4 * d)

    probs = K.softmax_fwd(z, t, 0.125, True)
    _, mu, rstd = K.layernorm_fwd(x, g, b, 1e-5)

    cases = {
        "softmax_fwd": (K.softmax_fwd, (z, t, 0.125, True)),
        "softmax_bwd": (K.softmax_bwd, (z, probs, t, 0.125, True, du)),
        "layernorm_fwd": (K.layernorm_fwd, (x, g, b, 1e-5)),
        "layernorm_bwd": (K.layernorm_bwd, (x, g, mu, rstd, dy)),
        "gelu_fwd": (K.gelu_fwd, (h,)),
        "gelu_bwd": (K.gelu_bwd, (h, dh)),
        "entropy_fwd": (K.entropy_rows_fwd, (probs, 1e-9)),
        "entropy_bwd": (K.entropy_rows_bwd, (probs, 1e-9, np.ones((N, T)))),
    }

    results = {}
    for backend in ("numpy", "numba"):
        try:
            K.set_backend(backend)
        except Exception as e:  # numba unavailable
            print(f"skipping backend {backend}: {e}")
            continue
        for name, (fn, fargs) in cases.items():
            results.setdefault(name, {})[backend] = bench(fn, fargs, args.reps)

    print(f"{'kernel':<16}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for name, r in results.items():
        np_us = r.get("numpy", float("nan")) * 1e6
        nb_us = r.get("numba", float("nan")) * 1e6
        ratio = np_us / nb_us if nb_us == nb_us and nb_us > 0 else float("nan")
        print(f"{name:<16}{np_us:>12.1f}{nb_us:>12.1f}{ratio:>8.1f}x")


if __name__ == "__main__":
    main()
