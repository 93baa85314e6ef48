"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is warmed up once (JIT compile) before timing. Outputs are also
compared so a speedup never hides a disagreement.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cartseg import kernels
from cartseg.phantom import PhantomSpec, generate_case


def _best(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    labels = generate_case(PhantomSpec(), 0).labels.array
    image = generate_case(PhantomSpec(), 0).image.array.astype(np.float64)
    fc = labels == 1
    moved = np.roll(fc, 1, axis=0)
    src = np.argwhere(kernels.surface_mask_numpy(fc))
    dst = np.argwhere(kernels.surface_mask_numpy(moved))
    sp = np.array([0.365, 0.365, 0.7])
    return [
        ("splitmix64 n=262144", lambda: kernels._splitmix64_jit(np.uint64(7), 262144), lambda: kernels.splitmix64_numpy(7, 262144)),
        ("block_mean 64^3 /(2,2,1)", lambda: kernels._block_mean_jit(image, 2, 2, 1), lambda: kernels.block_mean_numpy(image, 2, 2, 1)),
        ("surface_mask 64^3", lambda: kernels._surface_mask_jit(fc), lambda: kernels.surface_mask_numpy(fc)),
        (
            f"nearest_distances {len(src)}x{len(dst)}",
            lambda: kernels._nearest_distances_jit(src, dst, sp),
            lambda: kernels.nearest_distances_numpy(src, dst, sp),
        ),
    ]


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<34}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, jit_fn, np_fn in cases():
        a, b = jit_fn(), np_fn()
        if not np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=0, atol=1e-9):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_jit, t_np = _best(jit_fn, args.repeat), _best(np_fn, args.repeat)
        print(f"{name:<34}{t_jit * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_jit:>8.1f}x")


if __name__ == "__main__":
    main()
