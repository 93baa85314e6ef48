"""Fixed-size per-cartilage ROIs centred on class centroids, and paired crops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CartsegError
from .volume import Cartilage, LabelVolume, RoiBox, Volume, crop


@dataclass(frozen=True)
class RoiPlan:
    boxes: tuple[RoiBox, RoiBox, RoiBox]
    source_dims: tuple[int, int, int]
    fallback: tuple[str, ...] = ()

    def __post_init__(self):
        kinds = [b.cartilage for b in self.boxes]
        if kinds != [Cartilage.FC, Cartilage.TC, Cartilage.PC]:
            raise CartsegError("invalid-plan", f"expected boxes for FC, TC, PC in order, got {kinds}")
        for b in self.boxes:
            if not b.fits(self.source_dims):
                raise CartsegError("roi-out-of-bounds", f"{b} outside {self.source_dims}")

    def box(self, cartilage: Cartilage) -> RoiBox:
        return self.boxes[int(cartilage) - 1]

    def to_dict(self) -> dict:
        return {
            "source_dims": list(self.source_dims),
            "boxes": [b.to_dict() for b in self.boxes],
            "fallback": list(self.fallback),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoiPlan":
        return cls(
            tuple(RoiBox.from_dict(b) for b in d["boxes"]),
            tuple(d["source_dims"]),
            tuple(d.get("fallback", ())),
        )


@dataclass
class RoiSample:
    image_roi: Volume
    label_roi: LabelVolume
    box: RoiBox

    @property
    def cartilage(self) -> Cartilage:
        return self.box.cartilage


def _size_for(roi_sizes, cls: Cartilage):
    if cls.key in roi_sizes:
        return tuple(roi_sizes[cls.key])
    return tuple(roi_sizes[cls])


def locate_rois(coarse_labels: LabelVolume, roi_sizes, default_centers=None) -> RoiPlan:
    """One box per cartilage, centred on the rounded centroid of that class.

    ``roi_sizes`` and ``default_centers`` map ``"fc"``/``"tc"``/``"pc"`` to
    triples; default centres are fractions of the volume dims and are used when
    a class is missing from ``coarse_labels``.
    """
    dims = coarse_labels.dims
    arr = coarse_labels.array
    boxes, fallback = [], []
    for cls in Cartilage:
        size = _size_for(roi_sizes, cls)
        if any(s > d for s, d in zip(size, dims)):
            raise CartsegError("roi-larger-than-volume", f"{cls.name} roi {size} exceeds volume {dims}")
        idx = np.argwhere(arr == int(cls))
        if len(idx):
            # half-up rounding so the result does not depend on banker's rounding
            center = np.floor(idx.mean(axis=0) + 0.5).astype(int)
        else:
            if default_centers is None:
                raise CartsegError("missing-default-center", f"no voxels of {cls.name} and no default centre")
            frac = default_centers[cls.key] if cls.key in default_centers else default_centers[cls]
            center = np.floor(np.array(frac) * np.array(dims) + 0.5).astype(int)
            fallback.append(cls.name)
        origin = tuple(int(c) - s // 2 for c, s in zip(center, size))
        boxes.append(RoiBox.clamped(origin, size, cls, dims))
    return RoiPlan(tuple(boxes), dims, tuple(fallback))


def extract_samples(image: Volume, labels: LabelVolume, plan: RoiPlan) -> list[RoiSample]:
    """Image crop plus a binary label crop (1 only for the box's own class) per cartilage."""
    if image.dims != labels.dims:
        raise CartsegError("image-label-mismatch", f"image {image.dims} vs labels {labels.dims}")
    samples = []
    for box in plan.boxes:
        img = crop(image, box)
        lab = crop(labels, box)
        binary = LabelVolume((lab.array == int(box.cartilage)).astype(np.uint8), lab.spacing)
        samples.append(RoiSample(img, binary, box))
    return samples
