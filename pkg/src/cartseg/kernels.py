"""Hot inner loops, each with a numba-compiled path and a pure-numpy fallback.

The numba path is used when numba imports and ``CARTSEG_NUMBA`` is not set to
``0``/``false``/``off``. Both paths compute the same quantities; integer
kernels agree bit-for-bit, floating-point reductions agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

_OFF = {"0", "false", "no", "off"}


def numba_requested() -> bool:
    return os.environ.get("CARTSEG_NUMBA", "1").strip().lower() not in _OFF


USE_NUMBA = numba is not None and numba_requested()

JIT_OPTIONS = {"nogil": True, "cache": True}


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def splitmix64_numpy(state: int, n: int) -> np.ndarray:
    s = np.uint64(state & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        z = s + np.arange(1, n + 1, dtype=np.uint64) * _GAMMA
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
        z = z ^ (z >> _S31)
    return z


def block_mean_numpy(arr: np.ndarray, fx: int, fy: int, fz: int) -> np.ndarray:
    x, y, z = arr.shape
    blocks = arr.astype(np.float64).reshape(x // fx, fx, y // fy, fy, z // fz, fz)
    return blocks.mean(axis=(1, 3, 5))


def surface_mask_numpy(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    inner = (
        p[:-2, 1:-1, 1:-1]
        & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1]
        & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2]
        & p[1:-1, 1:-1, 2:]
    )
    return m & ~inner


def nearest_distances_numpy(
    src: np.ndarray, dst: np.ndarray, spacing: np.ndarray, chunk: int = 512
) -> np.ndarray:
    src_mm = src.astype(np.float64)
    dst_mm = dst.astype(np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    out = np.empty(len(src), dtype=np.float64)
    for start in range(0, len(src), chunk):
        a = src_mm[start : start + chunk]
        dx = (a[:, None, 0] - dst_mm[None, :, 0]) * sp[0]
        dy = (a[:, None, 1] - dst_mm[None, :, 1]) * sp[1]
        dz = (a[:, None, 2] - dst_mm[None, :, 2]) * sp[2]
        out[start : start + chunk] = np.sqrt((dx * dx + dy * dy + dz * dz).min(axis=1))
    return out


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if numba is not None:

    @numba.njit(**JIT_OPTIONS)
    def _splitmix64_jit(state, n):
        out = np.empty(n, dtype=np.uint64)
        z0 = np.uint64(state)
        for i in range(n):
            z = z0 + np.uint64(i + 1) * _GAMMA
            z = (z ^ (z >> _S30)) * _MIX1
            z = (z ^ (z >> _S27)) * _MIX2
            out[i] = z ^ (z >> _S31)
        return out

    @numba.njit(**JIT_OPTIONS)
    def _block_mean_jit(arr, fx, fy, fz):
        nx, ny, nz = arr.shape[0] // fx, arr.shape[1] // fy, arr.shape[2] // fz
        out = np.zeros((nx, ny, nz), dtype=np.float64)
        inv = 1.0 / (fx * fy * fz)
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    acc = 0.0
                    for a in range(fx):
                        for b in range(fy):
                            for c in range(fz):
                                acc += arr[i * fx + a, j * fy + b, k * fz + c]
                    out[i, j, k] = acc * inv
        return out

    @numba.njit(**JIT_OPTIONS)
    def _surface_mask_jit(mask):
        nx, ny, nz = mask.shape
        out = np.zeros(mask.shape, dtype=np.bool_)
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    if not mask[i, j, k]:
                        continue
                    if (
                        i == 0
                        or j == 0
                        or k == 0
                        or i == nx - 1
                        or j == ny - 1
                        or k == nz - 1
                        or not mask[i - 1, j, k]
                        or not mask[i + 1, j, k]
                        or not mask[i, j - 1, k]
                        or not mask[i, j + 1, k]
                        or not mask[i, j, k - 1]
                        or not mask[i, j, k + 1]
                    ):
                        out[i, j, k] = True
        return out

    @numba.njit(**JIT_OPTIONS)
    def _nearest_distances_jit(src, dst, spacing):
        n = src.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = np.inf
            ax, ay, az = float(src[i, 0]), float(src[i, 1]), float(src[i, 2])
            for j in range(dst.shape[0]):
                dx = (ax - float(dst[j, 0])) * spacing[0]
                dy = (ay - float(dst[j, 1])) * spacing[1]
                dz = (az - float(dst[j, 2])) * spacing[2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
            out[i] = np.sqrt(best)
        return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of a splitmix64 generator started at ``state``."""
    if USE_NUMBA:
        return _splitmix64_jit(np.uint64(state & 0xFFFFFFFFFFFFFFFF), n)
    return splitmix64_numpy(state, n)


def block_mean(arr: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    """Mean over non-overlapping ``factors``-sized blocks; dims must divide."""
    fx, fy, fz = (int(f) for f in factors)
    if USE_NUMBA:
        return _block_mean_jit(np.ascontiguousarray(arr, dtype=np.float64), fx, fy, fz)
    return block_mean_numpy(arr, fx, fy, fz)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    if USE_NUMBA:
        return _surface_mask_jit(np.ascontiguousarray(mask, dtype=np.bool_))
    return surface_mask_numpy(mask)


def nearest_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """For each point in ``src`` the Euclidean mm distance to the closest point in ``dst``."""
    sp = np.asarray(spacing, dtype=np.float64)
    if USE_NUMBA:
        return _nearest_distances_jit(
            np.ascontiguousarray(src, dtype=np.int64), np.ascontiguousarray(dst, dtype=np.int64), sp
        )
    return nearest_distances_numpy(src, dst, sp)
