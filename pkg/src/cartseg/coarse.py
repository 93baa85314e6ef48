"""Coarse whole-volume segmentor used to localise the cartilage ROIs."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import build_encoder_decoder
from .errors import CartsegError
from .volume import NUM_CLASSES, LabelVolume, Volume, downsample, pad_to_multiple, upsample_repeat

CE_EPS = 1e-7


class CoarseModel(nn.Module):
    """Encoder-decoder with a softmax head over {background, FC, TC, PC}."""

    def __init__(self, levels: int = 3, base_channels: int = 16):
        super().__init__()
        self.net = build_encoder_decoder(levels, base_channels, 1, NUM_CLASSES, attention=False)

    @property
    def levels(self) -> int:
        return self.net.levels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=1)


def prepare_coarse_input(image: Volume, factors, levels: int) -> tuple[np.ndarray, tuple]:
    """Down-sampled image padded up to a multiple of ``2**levels``; returns array and unpadded dims."""
    small = downsample(image, factors)
    padded = pad_to_multiple(small.array, (2**levels,) * 3)
    return padded, small.dims


def coarse_forward(model: CoarseModel, image: Volume, factors, upsample: bool = False) -> np.ndarray:
    """4-channel probabilities on the down-sampled grid (or repeated back to the image grid)."""
    if not np.all(np.isfinite(image.array)):
        raise CartsegError("non-finite-input", "image contains NaN or inf")
    arr, small_dims = prepare_coarse_input(image, factors, model.levels)
    param = next(model.parameters())
    x = torch.from_numpy(np.array(arr)).to(param.dtype)[None, None]
    with torch.no_grad():
        probs = model(x)[0].cpu().numpy()
    probs = probs[:, : small_dims[0], : small_dims[1], : small_dims[2]]
    if upsample:
        probs = upsample_repeat(probs, factors, image.dims)
    return probs


def coarse_labels(model: CoarseModel, image: Volume, factors) -> LabelVolume:
    """Hard coarse labels on the original image grid."""
    probs = coarse_forward(model, image, factors, upsample=True)
    return LabelVolume(np.argmax(probs, axis=0).astype(np.uint8), image.spacing)


def multiclass_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean ``-log p_true`` with probabilities clamped to ``[1e-7, 1]``.

    ``pred`` is ``(N, 4, X, Y, Z)`` (or ``(4, X, Y, Z)``) probabilities and
    ``target`` integer labels of the matching spatial shape.
    """
    if isinstance(target, LabelVolume):
        target = torch.from_numpy(target.array.astype(np.int64))
    if pred.dim() == target.dim() + 1 and pred.dim() == 4:
        pred, target = pred[None], target[None]
    if pred.dim() != target.dim() + 1 or pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise CartsegError("loss-shape-mismatch", f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p_true = torch.gather(pred, 1, target.long().unsqueeze(1))
    return -torch.log(p_true.clamp(CE_EPS, 1.0)).mean()


def downsample_labels(labels: np.ndarray, factors) -> np.ndarray:
    """Coarse-grid training target: a block containing any cartilage takes its most frequent cartilage class."""
    if tuple(factors) == (1, 1, 1):
        return labels.astype(np.int64)
    onehot = np.stack([(labels == c).astype(np.float32) for c in range(NUM_CLASSES)])
    onehot = pad_to_multiple(onehot, factors)
    t = torch.from_numpy(onehot)[None]
    pooled = F.avg_pool3d(t, kernel_size=tuple(factors), stride=tuple(factors))[0]
    fg = pooled[1:]
    best = fg.argmax(dim=0) + 1
    has_fg = fg.max(dim=0).values > 0
    return torch.where(has_fg, best, torch.zeros_like(best)).numpy().astype(np.int64)
