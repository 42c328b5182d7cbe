"""Backend benchmark: numba-jitted RK4 patch kernels against the numpy twins.

Times the batched patch integrator and the single-trajectory reference on
the same randomly drawn inputs and checks that the two backends agree to
float precision.  Run from the repo root:

    python benchmarks/bench_backends.py
    UFO_NUMBA=0 python benchmarks/bench_backends.py   # numpy only
"""

import argparse
import time

import numpy as np

from ufo import kernels
from ufo import tensorops as T


def build_inputs(patches, steps, d, width, seed):
    """Random but well-scaled integrator inputs; e = control width."""
    gen = T.stream_generator("bench-backends", seed)
    e = d + 1
    z0 = gen.standard_normal((patches, d))
    ext = 0.5 * gen.standard_normal((patches, steps, 3, e))
    hs = gen.uniform(0.05, 0.25, (patches, steps))
    wg = gen.standard_normal((e + d, width)) / np.sqrt(e + d)
    wv = gen.standard_normal((e + d, width)) / np.sqrt(e + d)
    # the gated field is superlinear in its state, so the output projection
    # is scaled down with trajectory length to keep the single unbroken
    # reference trajectory finite as well as every 12-step patch
    wo = gen.standard_normal((width, d)) * (0.5 / (patches * steps))
    return z0, ext, hs, wg, wv, wo


def time_call(fn, repeats):
    fn()                                   # warm-up; compiles the jit twin
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patches", type=int, default=720)
    ap.add_argument("--steps", type=int, default=12)
    ap.add_argument("--d", type=int, default=8)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    z0, ext, hs, wg, wv, wo = build_inputs(args.patches, args.steps,
                                           args.d, args.width, args.seed)
    backends = ["numpy"]
    if kernels.HAS_NUMBA and kernels.numba_enabled():
        backends.append("numba")
    else:
        print("numba unavailable or disabled; timing the numpy twin only")

    print(f"patched integrator: {args.patches} patches x {args.steps} steps, "
          f"d={args.d}, field width {args.width}")
    results = {}
    for backend in backends:
        seconds = time_call(
            lambda: kernels.rk4_patches(z0, ext, hs, 0, wg, wv, wo,
                                        backend=backend),
            args.repeats)
        results[backend] = seconds
        print(f"  {backend:<6} {seconds * 1e3:8.2f} ms")
    if len(backends) == 2:
        a, _ = kernels.rk4_patches(z0, ext, hs, 0, wg, wv, wo,
                                   backend="numpy")
        b, _ = kernels.rk4_patches(z0, ext, hs, 0, wg, wv, wo,
                                   backend="numba")
        print(f"  speedup {results['numpy'] / results['numba']:.2f}x, "
              f"max |numpy - numba| = {np.abs(a - b).max():.3e}")

    print(f"sequential reference: one trajectory, "
          f"{args.patches * args.steps} steps")
    ext_s = ext.reshape(-1, 3, ext.shape[-1])
    hs_s = hs.reshape(-1)
    for backend in backends:
        seconds = time_call(
            lambda: kernels.rk4_sequential(z0[0], ext_s, hs_s, wg, wv, wo,
                                           backend=backend),
            args.repeats)
        print(f"  {backend:<6} {seconds * 1e3:8.2f} ms")
    if len(backends) == 2:
        a = kernels.rk4_sequential(z0[0], ext_s, hs_s, wg, wv, wo,
                                   backend="numpy")
        b = kernels.rk4_sequential(z0[0], ext_s, hs_s, wg, wv, wo,
                                   backend="numba")
        print(f"  max |numpy - numba| = {np.abs(a - b).max():.3e}")


if __name__ == "__main__":
    main()
