"""Synthetic knee phantoms: a femur sphere capped by a cartilage shell, two
tibial plates underneath, and a small patellar shell in front.

Every case is a pure function of ``(seed, index)`` through a splitmix64 stream
seeded with ``seed ^ index``. Geometry is in voxel units; ``y`` grows
downwards and ``z`` grows posteriorly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CartsegError
from .volume import Cartilage, LabelVolume, Volume, read_csgv, write_csgv

BACKGROUND = 0.2
BONE = 0.8
CARTILAGE = 0.55

SPLITS = ("train", "val", "test")


class SplitMix64:
    """Sequential splitmix64 stream."""

    _GAMMA = 0x9E3779B97F4A7C15
    _MASK = 0xFFFFFFFFFFFFFFFF

    def __init__(self, state: int):
        self.state = state & self._MASK

    def raw(self, n: int) -> np.ndarray:
        out = kernels.splitmix64(self.state, n)
        self.state = (self.state + n * self._GAMMA) & self._MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + int(self.uniform(1)[0] * (hi - lo + 1))

    def normal(self, n: int) -> np.ndarray:
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (0.365, 0.365, 0.7)
    seed: int = 7
    defect_probability: float = 0.0
    noise_sigma: float = 0.05
    jitter_voxels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or any(d < 32 for d in self.dims):
            raise CartsegError("phantom-too-small", f"every dim must be >= 32, got {self.dims}")
        if not 0.0 <= self.defect_probability <= 1.0:
            raise CartsegError("invalid-phantom-spec", "defect_probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.jitter_voxels < 0:
            raise CartsegError("invalid-phantom-spec", "noise_sigma and jitter_voxels must be >= 0")
        if any(not s > 0 for s in self.spacing):
            raise CartsegError("invalid-phantom-spec", "spacing must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{**d, "dims": tuple(d["dims"]), "spacing": tuple(d["spacing"])})


@dataclass
class PhantomCase:
    image: Volume
    labels: LabelVolume
    case_id: str
    defects: list[tuple[str, int]] = field(default_factory=list)


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def _geometry(spec: PhantomSpec, rng: SplitMix64) -> dict:
    X, Y, Z = spec.dims
    m = min(spec.dims)
    j = spec.jitter_voxels
    gap = 2 * j + 2

    def jitter():
        return np.array([rng.integer(-j, j) for _ in range(3)], dtype=np.float64)

    g = {
        "R": float(round(0.15 * m)),
        "pr": float(round(0.08 * m)),
        "plate_a": float(round(0.08 * m)),
        "plate_b": float(round(0.13 * m)),
        "plate_off": float(round(0.11 * m)),
        "tibia_depth": float(round(0.12 * m)),
    }
    g["t_fc"] = rng.integer(2, 3)
    g["t_tc"] = rng.integer(2, 3)
    g["t_pc"] = rng.integer(2, 3)
    femur = np.array([0.5 * X, 0.42 * Y, 0.58 * Z]).round()
    g["femur"] = femur + jitter()
    g["plate_top"] = femur[1] + g["R"] + gap + rng.integer(-j, j)
    plate_jit = jitter()
    g["plate_center"] = np.array([femur[0] + plate_jit[0], 0.0, femur[2] + plate_jit[2]])
    patella = np.array(
        [femur[0], femur[1] - round(0.1 * m), femur[2] - (g["R"] + 3) - gap - (g["pr"] + 3)]
    )
    g["patella"] = patella + jitter()
    return g


def _rasterize(spec: PhantomSpec, g: dict) -> tuple[np.ndarray, np.ndarray]:
    X, Y, Z = spec.dims
    x, y, z = np.meshgrid(
        np.arange(X, dtype=np.float64),
        np.arange(Y, dtype=np.float64),
        np.arange(Z, dtype=np.float64),
        indexing="ij",
    )
    labels = np.zeros(spec.dims, dtype=np.uint8)
    image = np.full(spec.dims, BACKGROUND, dtype=np.float64)

    fx, fy, fz = g["femur"]
    rf = np.sqrt((x - fx) ** 2 + (y - fy) ** 2 + (z - fz) ** 2)
    femur_bone = rf < g["R"]
    fc = (rf >= g["R"]) & (rf < g["R"] + g["t_fc"]) & (y < fy)

    top = g["plate_top"]
    px, _, pz = g["plate_center"]
    footprint = np.zeros(spec.dims, dtype=bool)
    for side in (-1.0, 1.0):
        cx = px + side * g["plate_off"]
        footprint |= ((x - cx) / g["plate_a"]) ** 2 + ((z - pz) / g["plate_b"]) ** 2 <= 1.0
    tc = footprint & (y >= top) & (y < top + g["t_tc"])
    tibia_bone = footprint & (y >= top + g["t_tc"]) & (y < top + g["t_tc"] + g["tibia_depth"])

    qx, qy, qz = g["patella"]
    rp = np.sqrt((x - qx) ** 2 + (y - qy) ** 2 + (z - qz) ** 2)
    patella_bone = rp < g["pr"]
    pc = (rp >= g["pr"]) & (rp < g["pr"] + g["t_pc"]) & (z > qz)

    image[femur_bone | tibia_bone | patella_bone] = BONE
    for cls, mask in ((Cartilage.FC, fc), (Cartilage.TC, tc), (Cartilage.PC, pc)):
        free = mask & (labels == 0)
        labels[free] = int(cls)
        image[free] = CARTILAGE
    return image, labels


def _fits(spec: PhantomSpec, labels: np.ndarray) -> bool:
    # every cartilage must be present and must not touch the volume border
    for cls in Cartilage:
        idx = np.argwhere(labels == cls)
        if len(idx) == 0:
            return False
        if idx.min() == 0 or np.any(idx.max(axis=0) >= np.array(spec.dims) - 1):
            return False
    return True


def generate_case(spec: PhantomSpec, index: int) -> PhantomCase:
    """Deterministic phantom number ``index`` for ``spec``."""
    rng = SplitMix64(spec.seed ^ index)
    g = _geometry(spec, rng)
    image, labels = _rasterize(spec, g)
    if not _fits(spec, labels):
        raise CartsegError("phantom-too-small", f"shapes do not fit in dims {spec.dims}")

    # defect draws happen unconditionally so the noise stream is independent of the probability
    u = rng.uniform(1)[0]
    cls = Cartilage(rng.integer(1, 3))
    pick = rng.uniform(1)[0]
    radius = rng.integer(2, 4)
    defects = []
    if u < spec.defect_probability:
        voxels = np.argwhere(labels == cls)
        center = voxels[int(pick * len(voxels))]
        dist2 = ((np.indices(spec.dims) - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        for r in range(radius, 0, -1):
            hole = (dist2 <= r * r) & (labels == cls)
            if 2 * int(hole.sum()) < len(voxels):
                break
        labels[hole] = 0
        image[hole] = BACKGROUND
        defects.append((cls.name, int(hole.sum())))

    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.normal(image.size).reshape(spec.dims)
    image = np.clip(image, 0.0, 1.0)
    return PhantomCase(
        image=Volume(image.astype(np.float32), spec.spacing),
        labels=LabelVolume(labels, spec.spacing),
        case_id=case_id(index),
        defects=defects,
    )


def split_counts(count: int) -> tuple[int, int, int]:
    """70/15/15 by floor; train never empty, leftovers go to test."""
    train = max(1, (70 * count) // 100)
    val = min((15 * count) // 100, count - train)
    return train, val, count - train - val


def split_of(index: int, count: int) -> str:
    train, val, _ = split_counts(count)
    if index < train:
        return "train"
    if index < train + val:
        return "val"
    return "test"


def generate_dataset(spec: PhantomSpec, count: int, out_dir) -> dict:
    """Write ``count`` cases plus ``manifest.json`` under ``out_dir``; returns the manifest."""
    if count < 1:
        raise CartsegError("invalid-count", "count must be >= 1")
    out = Path(out_dir)
    records = []
    for i in range(count):
        case = generate_case(spec, i)
        rel = Path(case.case_id)
        try:
            (out / rel).mkdir(parents=True, exist_ok=True)
            write_csgv(out / rel / "image.csgv", case.image)
            write_csgv(out / rel / "label.csgv", case.labels)
        except OSError as exc:
            raise CartsegError("dataset-write-failed", f"{out / rel}: {exc}") from exc
        records.append(
            {
                "id": case.case_id,
                "split": split_of(i, count),
                "image": str(rel / "image.csgv"),
                "label": str(rel / "label.csgv"),
                "defects": [list(d) for d in case.defects],
            }
        )
    manifest = {"format": "cartseg-dataset/1", "spec": spec.to_dict(), "cases": records}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise CartsegError("dataset-write-failed", f"{path}: {exc}") from exc
    return manifest


@dataclass
class CaseRecord:
    case_id: str
    split: str
    image: Volume
    labels: LabelVolume
    defects: list = field(default_factory=list)


class Dataset:
    """Phantom dataset loaded eagerly from a directory written by :func:`generate_dataset`."""

    def __init__(self, root, cases: list[CaseRecord], spec: dict | None = None):
        self.root = Path(root) if root is not None else None
        self.cases = cases
        self.spec = spec or {}

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except OSError as exc:
            raise CartsegError("dataset-read-failed", f"{root / 'manifest.json'}: {exc}") from exc
        cases = []
        for rec in manifest["cases"]:
            cases.append(
                CaseRecord(
                    case_id=rec["id"],
                    split=rec["split"],
                    image=read_csgv(root / rec["image"]),
                    labels=read_csgv(root / rec["label"]),
                    defects=rec.get("defects", []),
                )
            )
        return cls(root, cases, manifest.get("spec"))

    @classmethod
    def from_cases(cls, cases: list[PhantomCase], splits: list[str]) -> "Dataset":
        return cls(
            None,
            [CaseRecord(c.case_id, s, c.image, c.labels, c.defects) for c, s in zip(cases, splits)],
        )

    def split(self, name: str) -> list[CaseRecord]:
        return [c for c in self.cases if c.split == name]

    def __len__(self) -> int:
        return len(self.cases)
