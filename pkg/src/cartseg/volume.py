"""Volume types, ROI geometry, label encoding and the CSGV file format.

Arrays are indexed ``[x, y, z]`` in memory. The on-disk payload is written
x-fastest (Fortran order) so the file layout is independent of that choice.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CartsegError

NUM_CLASSES = 4
Triple = tuple[int, int, int]


class Cartilage(enum.IntEnum):
    FC = 1
    TC = 2
    PC = 3

    @property
    def key(self) -> str:
        return self.name.lower()


def _triple(values, kind=int) -> tuple:
    t = tuple(kind(v) for v in values)
    if len(t) != 3:
        raise CartsegError("bad-triple", f"expected 3 values, got {len(t)}")
    return t


def _check_geometry(dims, spacing):
    if any(d < 1 for d in dims):
        raise CartsegError("invalid-dims", f"dims must be >= 1, got {dims}")
    if any(not s > 0 for s in spacing):
        raise CartsegError("invalid-spacing", f"spacing must be > 0, got {spacing}")


@dataclass(frozen=True, eq=False)
class Volume:
    """Real-valued 3D image with physical spacing in millimetres."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3:
            raise CartsegError("invalid-dims", f"expected a 3D array, got shape {arr.shape}")
        spacing = _triple(self.spacing, float)
        _check_geometry(arr.shape, spacing)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def array(self) -> np.ndarray:
        return self.voxels


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label field over {0 background, 1 FC, 2 TC, 3 PC}."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise CartsegError("invalid-dims", f"expected a 3D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() >= NUM_CLASSES):
            raise CartsegError("invalid-label", "label values must lie in {0,1,2,3}")
        arr = raw.astype(np.uint8)
        spacing = _triple(self.spacing, float)
        _check_geometry(arr.shape, spacing)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def array(self) -> np.ndarray:
        return self.labels


@dataclass(frozen=True)
class RoiBox:
    origin: Triple
    size: Triple
    cartilage: Cartilage

    def __post_init__(self):
        object.__setattr__(self, "origin", _triple(self.origin))
        object.__setattr__(self, "size", _triple(self.size))
        object.__setattr__(self, "cartilage", Cartilage(self.cartilage))
        if any(s < 1 for s in self.size):
            raise CartsegError("invalid-roi", f"roi size must be >= 1, got {self.size}")

    @classmethod
    def clamped(cls, origin, size, cartilage, dims) -> "RoiBox":
        size = _triple(size)
        dims = _triple(dims)
        if any(s > d for s, d in zip(size, dims)):
            raise CartsegError("roi-larger-than-volume", f"roi {size} exceeds volume {dims}")
        o = tuple(min(max(int(o), 0), d - s) for o, s, d in zip(origin, size, dims))
        return cls(o, size, cartilage)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def fits(self, dims) -> bool:
        return all(o >= 0 and o + s <= d for o, s, d in zip(self.origin, self.size, dims))

    def contains(self, point) -> bool:
        return all(o <= p < o + s for p, o, s in zip(point, self.origin, self.size))

    def to_dict(self) -> dict:
        return {"cartilage": self.cartilage.name, "origin": list(self.origin), "size": list(self.size)}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiBox":
        return cls(tuple(d["origin"]), tuple(d["size"]), Cartilage[d["cartilage"]])


def crop(vol, box: RoiBox):
    """Sub-volume of ``vol`` inside ``box``; same type and spacing as ``vol``."""
    if not box.fits(vol.dims):
        raise CartsegError("roi-out-of-bounds", f"box {box.origin}+{box.size} outside {vol.dims}")
    data = vol.array[box.slices].copy()
    return type(vol)(data, vol.spacing)


def paste_accumulate(dst: np.ndarray, src: np.ndarray, box: RoiBox, channel: int, rule: str = "max") -> None:
    """Write ``src`` into ``dst[channel]`` at ``box`` in place.

    ``rule`` is ``"overwrite"`` or ``"max"`` (elementwise maximum with what is
    already there). ``dst`` has shape ``(4, X, Y, Z)``.
    """
    if channel == 0:
        raise CartsegError("background-not-writable", "channel 0 is derived, not pasted")
    if channel not in (1, 2, 3):
        raise CartsegError("invalid-channel", f"channel must be 1, 2 or 3, got {channel}")
    src = np.asarray(src)
    if src.shape != tuple(box.size):
        raise CartsegError("fusion-shape-mismatch", f"src {src.shape} vs box {box.size}")
    if not box.fits(dst.shape[1:]):
        raise CartsegError("roi-out-of-bounds", f"box {box.origin}+{box.size} outside {dst.shape[1:]}")
    region = dst[(channel, *box.slices)]
    if rule == "overwrite":
        region[...] = src
    elif rule == "max":
        np.maximum(region, src, out=region)
    else:
        raise ValueError(f"unknown paste rule {rule!r}")


def pad_to_multiple(arr: np.ndarray, multiples) -> np.ndarray:
    """Edge-replicate on the high side of each axis up to the next multiple."""
    pads = [(0, (-d) % int(m)) for d, m in zip(arr.shape[-3:], multiples)]
    if not any(p for _, p in pads):
        return arr
    lead = [(0, 0)] * (arr.ndim - 3)
    return np.pad(arr, lead + pads, mode="edge")


def downsample(vol: Volume, factors) -> Volume:
    """Block-mean down-sampling; pads by edge replication when factors do not divide."""
    factors = _triple(factors)
    if any(f <= 0 for f in factors):
        raise CartsegError("invalid-factor", f"factors must be >= 1, got {factors}")
    spacing = tuple(s * f for s, f in zip(vol.spacing, factors))
    if factors == (1, 1, 1):
        return Volume(vol.array.copy(), spacing)
    arr = pad_to_multiple(vol.array, factors)
    return Volume(kernels.block_mean(arr, factors).astype(np.float32), spacing)


def upsample_repeat(arr: np.ndarray, factors, dims=None) -> np.ndarray:
    """Nearest (repetition) up-sampling of the last three axes, cropped to ``dims``."""
    out = arr
    for axis, f in zip(range(-3, 0), factors):
        if f > 1:
            out = np.repeat(out, int(f), axis=axis)
    if dims is not None:
        out = out[..., : dims[0], : dims[1], : dims[2]]
    return out


def one_hot(lab: LabelVolume) -> np.ndarray:
    """``(4, X, Y, Z)`` float32 encoding; channel c is 1 where the label is c."""
    classes = np.arange(NUM_CLASSES, dtype=np.uint8).reshape(-1, 1, 1, 1)
    return (lab.array[None] == classes).astype(np.float32)


def argmax_labels(probs: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Hard labels from a 4-channel field; ties go to the lowest channel."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] != NUM_CLASSES:
        raise CartsegError("invalid-probabilities", f"expected (4,X,Y,Z), got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise CartsegError("non-finite-probability", "probability field contains NaN or inf")
    # np.argmax returns the first maximal index, which is the required tie rule
    return LabelVolume(np.argmax(probs, axis=0).astype(np.uint8), spacing)


# --------------------------------------------------------------------------
# CSGV file format
# --------------------------------------------------------------------------

CSGV_MAGIC = b"CSGV"
CSGV_VERSION = 1
DTYPE_REAL32 = 0
DTYPE_UINT8 = 1
_HEADER = struct.Struct("<4sBB3I3f")
_PAYLOAD_DTYPES = {DTYPE_REAL32: np.dtype("<f4"), DTYPE_UINT8: np.dtype("u1")}


def encode_csgv(vol) -> bytes:
    if isinstance(vol, LabelVolume):
        code = DTYPE_UINT8
    elif isinstance(vol, Volume):
        code = DTYPE_REAL32
    else:
        raise TypeError(f"cannot encode {type(vol).__name__}")
    header = _HEADER.pack(CSGV_MAGIC, CSGV_VERSION, code, *vol.dims, *vol.spacing)
    payload = np.asarray(vol.array, dtype=_PAYLOAD_DTYPES[code]).tobytes(order="F")
    return header + payload


def decode_csgv(buf: bytes):
    if len(buf) < _HEADER.size:
        raise CartsegError("csgv-truncated", "file shorter than header")
    magic, version, code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(buf)
    if magic != CSGV_MAGIC:
        raise CartsegError("csgv-bad-magic", f"magic {magic!r}")
    if version != CSGV_VERSION:
        raise CartsegError("csgv-bad-version", f"version {version}")
    if code not in _PAYLOAD_DTYPES:
        raise CartsegError("csgv-bad-dtype", f"dtype code {code}")
    dtype = _PAYLOAD_DTYPES[code]
    count = nx * ny * nz
    expected = _HEADER.size + count * dtype.itemsize
    if len(buf) != expected:
        raise CartsegError("csgv-truncated", f"expected {expected} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEADER.size)
    arr = data.reshape((nx, ny, nz), order="F")
    spacing = (sx, sy, sz)
    if code == DTYPE_UINT8:
        return LabelVolume(np.ascontiguousarray(arr), spacing)
    return Volume(np.ascontiguousarray(arr, dtype=np.float32), spacing)


def write_csgv(path, vol) -> None:
    Path(path).write_bytes(encode_csgv(vol))


def read_csgv(path):
    return decode_csgv(Path(path).read_bytes())
