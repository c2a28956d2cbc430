"""Time the numba kernels against their pure-numpy twins.

Imports both implementations directly, so ROVERSEG_BACKEND does not
matter here.  Reports per-kernel wall time plus the numeric gap between
backends: convolutions should agree to float64 round-off, the ray
marcher bit for bit.

Run:  python3 benchmarks/compare_backends.py [--repeats 20]
"""

import argparse
import statistics
import time

import numpy as np

from roverseg import kernels, scenegen


def _best_ms(fn, repeats):
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    # mid-network desk-scale shape: stage 3 of the encoder
    x = rng.standard_normal((16, 24, 24))
    w = rng.standard_normal((24, 16, 3, 3))
    b = rng.standard_normal(24)
    gy = rng.standard_normal((24, 12, 12))

    cases = [
        (
            "conv2d forward",
            lambda: kernels.conv2d_forward_numba(x, w, b, 2, 1),
            lambda: kernels.conv2d_forward_numpy(x, w, b, 2, 1),
        ),
        (
            "conv2d backward input",
            lambda: kernels.conv2d_backward_input_numba(gy, w, (24, 24), 2, 1),
            lambda: kernels.conv2d_backward_input_numpy(gy, w, (24, 24), 2, 1),
        ),
        (
            "conv2d backward kernel",
            lambda: kernels.conv2d_backward_kernel_numba(gy, x, 3, 3, 2, 1),
            lambda: kernels.conv2d_backward_kernel_numpy(gy, x, 3, 3, 2, 1),
        ),
    ]
    rows = []
    for name, f_nb, f_np in cases:
        a, b_ = f_nb(), f_np()
        gap = float(np.abs(a - b_).max())
        rows.append((name, _best_ms(f_nb, repeats), _best_ms(f_np, repeats), f"max|diff|={gap:.2e}"))
    return rows


def bench_march(repeats):
    spec = scenegen.make_spec("hr", seed=7, width=96, height=96)
    hf = scenegen.gen_heightfield(spec)
    origin, dirs = scenegen.camera_rays(hf, spec)

    def f_nb():
        return kernels.march_rays_numba(
            hf.grid, hf.cell, origin, dirs, scenegen.FAR, scenegen.MARCH_DT, scenegen.MARCH_BISECT
        )

    def f_np():
        return kernels.march_rays_numpy(
            hf.grid, hf.cell, origin, dirs, scenegen.FAR, scenegen.MARCH_DT, scenegen.MARCH_BISECT
        )

    (t_a, h_a), (t_b, h_b) = f_nb(), f_np()
    exact = np.array_equal(t_a, t_b) and np.array_equal(h_a, h_b)
    note = "bitwise identical" if exact else "MISMATCH"
    return [("ray march 96x96", _best_ms(f_nb, repeats), _best_ms(f_np, repeats), note)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20, help="timed repeats per kernel (median reported)")
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rows = bench_conv(args.repeats) + bench_march(args.repeats)
    name_w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{name_w}}  {'numba ms':>9}  {'numpy ms':>9}  {'speedup':>7}  agreement")
    for name, nb_ms, np_ms, note in rows:
        print(f"{name:<{name_w}}  {nb_ms:9.3f}  {np_ms:9.3f}  {np_ms / nb_ms:6.2f}x  {note}")


if __name__ == "__main__":
    main()
