"""Time the numba kernels against the pure-numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``.  Both implementations live
in ``aquant.kernels``; this script calls them directly so one process can
measure the pair regardless of which backend the package picked at import.
"""

import time

import numpy as np

from aquant import kernels


def timeit(fn, *args, repeat=20):
    fn(*args)  # warm-up (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_im2col(rng):
    img = rng.standard_normal((32, 28, 28))
    k, stride, pad = 3, 1, 1
    h_o = w_o = 28
    out = np.empty((img.shape[0] * k * k, h_o * w_o))
    rows = [("im2col 32x28x28 k3", kernels._im2col_np, img, k, stride, pad, h_o, w_o, out)]
    if kernels.HAS_NUMBA:
        rows.append(("im2col 32x28x28 k3", kernels._im2col_nb, img, k, stride, pad, h_o, w_o, out))
    return rows


def bench_col2img(rng):
    c, h, w = 32, 28, 28
    k, stride, pad = 3, 1, 1
    h_o = w_o = 28
    cols = rng.standard_normal((c * k * k, h_o * w_o))
    grad = np.zeros((c, h, w))
    rows = [("col2img 32x28x28 k3", kernels._col2img_np, cols, k, stride, pad, c, h, w, h_o, w_o, grad)]
    if kernels.HAS_NUMBA:
        rows.append(("col2img 32x28x28 k3", kernels._col2img_nb, cols, k, stride, pad, c, h, w, h_o, w_o, grad))
    return rows


def bench_round(rng):
    u = rng.uniform(-10, 10, size=1_000_000)
    border = rng.uniform(0, 1, size=u.size)
    q = np.empty_like(u)
    inside = np.empty(u.shape, dtype=np.bool_)
    rows = [("round_border 1e6", kernels._round_border_np, u, border, -8.0, 7.0, q, inside)]
    if kernels.HAS_NUMBA:
        rows.append(("round_border 1e6", kernels._round_border_nb, u, border, -8.0, 7.0, q, inside))
    return rows


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.backend_name()}")
    if not kernels.HAS_NUMBA:
        print("numba not loaded (AQUANT_NUMBA=0 or not installed); timing numpy only")
    print(f"{'kernel':<24}{'backend':<10}{'best ms':>10}{'speedup':>10}")
    for group in (bench_im2col(rng), bench_col2img(rng), bench_round(rng)):
        base = None
        for (name, fn, *args) in group:
            flavor = "numba" if (kernels.HAS_NUMBA and fn.__name__.endswith("_nb")) else "numpy"
            ms = timeit(fn, *args) * 1e3
            if flavor == "numpy":
                base = ms
            rel = f"{base / ms:.2f}x" if base is not None else ""
            print(f"{name:<24}{flavor:<10}{ms:>10.3f}{rel:>10}")


if __name__ == "__main__":
    main()
