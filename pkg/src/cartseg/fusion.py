"""ROI fusion back to the full volume, the conditional discriminator, and the
adversarial objectives for the discriminator and the agents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .agents import AgentTeam, agent_forward, binary_ce
from .blocks import ConvNormAct, ResidualBlock
from .coarse import multiclass_ce
from .errors import CartsegError
from .roi import RoiPlan, RoiSample, extract_samples
from .volume import NUM_CLASSES, Cartilage, LabelVolume, Volume, one_hot

FUSE_EPS = 1e-8


@dataclass
class FusedPrediction:
    probs: torch.Tensor  # (1, 4, X, Y, Z): background, FC, TC, PC
    plan: RoiPlan


def _place(out: torch.Tensor, box, dims) -> torch.Tensor:
    """Zero-pad an ROI tensor ``(1, 1, *box.size)`` so it sits at ``box`` in ``dims``."""
    pads = []
    for o, s, d in reversed(list(zip(box.origin, box.size, dims))):
        pads += [o, d - o - s]
    return F.pad(out, pads)


def fuse(outputs, plan: RoiPlan, dims) -> FusedPrediction:
    """Scatter the three agents' probabilities into a 4-channel full-volume field.

    Background is ``max(0, 1 - sum of cartilage channels)``. Where the
    cartilage channels sum above one they are divided by that sum, which is the
    same as renormalising all four channels; elsewhere values pass through
    untouched.
    """
    dims = tuple(int(d) for d in dims)
    if len(outputs) != 3:
        raise CartsegError("fusion-shape-mismatch", f"need three agent outputs, got {len(outputs)}")
    channels = []
    for out, box in zip(outputs, plan.boxes):
        while out.dim() < 5:
            out = out.unsqueeze(0)
        if tuple(out.shape[2:]) != tuple(box.size) or out.shape[:2] != (1, 1):
            raise CartsegError(
                "fusion-shape-mismatch", f"{box.cartilage.name} output {tuple(out.shape)} vs box {box.size}"
            )
        if not box.fits(dims):
            raise CartsegError("fusion-shape-mismatch", f"{box.cartilage.name} box outside {dims}")
        channels.append(_place(out, box, dims))
    fg = torch.cat(channels, dim=1)
    total = fg.sum(dim=1, keepdim=True)
    over = total > 1.0
    fg = torch.where(over, fg / total.clamp_min(FUSE_EPS), fg)
    background = (1.0 - fg.sum(dim=1, keepdim=True)).clamp_min(0.0)
    background = torch.where(over, torch.zeros_like(background), background)
    return FusedPrediction(torch.cat([background, fg], dim=1), plan)


class Discriminator(nn.Module):
    """Scores an (image, 4-channel mask) pair: probability that the mask is ground truth."""

    def __init__(self, base_channels: int = 16, levels: int = 4, in_channels: int = 1 + NUM_CLASSES):
        super().__init__()
        self.levels = levels
        cin = in_channels
        for lvl in range(levels):
            cout = base_channels * 2**lvl
            self.add_module(f"down{lvl}", ConvNormAct(cin, cout, 2, stride=2))
            self.add_module(f"res{lvl}", ResidualBlock(cout))
            cin = cout
        self.fc = nn.Linear(cin, 1)

    def logit(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for lvl in range(self.levels):
            h = getattr(self, f"res{lvl}")(getattr(self, f"down{lvl}")(h))
        return self.fc(h.mean(dim=(2, 3, 4)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(x))


def _pool(t: torch.Tensor, factors) -> torch.Tensor:
    factors = tuple(int(f) for f in factors)
    pads = []
    for d, f in reversed(list(zip(t.shape[2:], factors))):
        pads += [0, (-d) % f]
    if any(pads):
        t = F.pad(t, pads, mode="replicate")
    if factors == (1, 1, 1):
        return t
    return F.avg_pool3d(t, kernel_size=factors, stride=factors)


def discriminator_input(image: torch.Tensor, mask4: torch.Tensor, factors, levels: int) -> torch.Tensor:
    if image.shape[0] != mask4.shape[0] or image.shape[2:] != mask4.shape[2:] or mask4.shape[1] != NUM_CLASSES:
        raise CartsegError(
            "discriminator-input-mismatch", f"image {tuple(image.shape)} vs mask {tuple(mask4.shape)}"
        )
    x = torch.cat([image, mask4], dim=1)
    x = _pool(x, factors)
    return _pad_to(x, 2**levels)


def _pad_to(x: torch.Tensor, k: int) -> torch.Tensor:
    pads = []
    for d in reversed(x.shape[2:]):
        pads += [0, (-d) % k]
    return F.pad(x, pads, mode="replicate") if any(pads) else x


def discriminate(D: Discriminator, image: torch.Tensor, mask4: torch.Tensor, factors=(1, 1, 1)) -> torch.Tensor:
    """``(N, 1)`` probability that ``mask4`` is the ground-truth labelling of ``image``."""
    return D(discriminator_input(image, mask4, factors, D.levels))


def _ones_like_score(score: torch.Tensor, value: float) -> torch.Tensor:
    return torch.full_like(score, value)


def discriminator_loss(D: Discriminator, image: torch.Tensor, y_real: torch.Tensor, y_fake, factors=(1, 1, 1)):
    """BCE(D(x, y), 1) + BCE(D(x, F), 0); the fused prediction is treated as a constant."""
    fake = y_fake.probs if isinstance(y_fake, FusedPrediction) else y_fake
    real_score = discriminate(D, image, y_real, factors)
    fake_score = discriminate(D, image, fake.detach(), factors)
    return binary_ce(real_score, _ones_like_score(real_score, 1.0)) + binary_ce(
        fake_score, _ones_like_score(fake_score, 0.0)
    )


@dataclass
class CaseTensors:
    """Full-volume tensors for one case, built once and reused every step."""

    image: Volume
    labels: LabelVolume
    image_t: torch.Tensor  # (1, 1, X, Y, Z)
    labels_t: torch.Tensor  # (1, X, Y, Z) int64
    onehot_t: torch.Tensor  # (1, 4, X, Y, Z)

    @classmethod
    def build(cls, image: Volume, labels: LabelVolume, dtype=torch.float32) -> "CaseTensors":
        return cls(
            image,
            labels,
            torch.from_numpy(image.array.copy()).to(dtype)[None, None],
            torch.from_numpy(labels.array.astype(np.int64))[None],
            torch.from_numpy(one_hot(labels)).to(dtype)[None],
        )

    @property
    def dims(self):
        return self.image.dims


@dataclass
class LossTerms:
    total: torch.Tensor
    single: dict  # cartilage key -> L_s
    joint: torch.Tensor
    adversarial: torch.Tensor
    fused: FusedPrediction

    def as_floats(self) -> dict:
        out = {f"L_s_{k}": float(v.detach()) for k, v in self.single.items()}
        out["L_m"] = float(self.joint.detach())
        out["adv"] = float(self.adversarial.detach())
        out["total"] = float(self.total.detach())
        return out


def agents_loss(
    agents: AgentTeam,
    D: Discriminator | None,
    case: CaseTensors,
    plan: RoiPlan,
    weights=(1.0, 1.0, 1.0),
    factors=(1, 1, 1),
    samples: list[RoiSample] | None = None,
) -> LossTerms:
    """Weighted sum of the three single-agent losses, the joint multi-class
    loss on the fused field, and the adversarial term BCE(D(x, F), 1).

    ``D`` may be ``None`` only when the adversarial weight is zero.
    """
    w_s, w_m, w_a = (float(w) for w in weights)
    if samples is None:
        samples = extract_samples(case.image, case.labels, plan)
    preds, single = [], {}
    for sample in samples:
        agent = agents.agent(sample.cartilage)
        pred = agent_forward(agent, sample.image_roi)
        target = torch.from_numpy(sample.label_roi.array.astype(np.float32))
        single[sample.cartilage.key] = binary_ce(pred, target)
        preds.append(pred)
    if w_m == 0.0 and w_a == 0.0:
        # joint term only logged, keep it out of the graph
        with torch.no_grad():
            fused = fuse([p.detach() for p in preds], plan, case.dims)
            joint = multiclass_ce(fused.probs, case.labels_t)
    else:
        fused = fuse(preds, plan, case.dims)
        joint = multiclass_ce(fused.probs, case.labels_t)
    if w_a != 0.0:
        if D is None:
            raise CartsegError("missing-discriminator", "adversarial weight is non-zero but no discriminator given")
        score = discriminate(D, case.image_t.to(fused.probs.dtype), fused.probs, factors)
        adversarial = binary_ce(score, _ones_like_score(score, 1.0))
    else:
        adversarial = torch.zeros((), dtype=joint.dtype)
    total = w_s * sum(single.values())
    if w_m != 0.0:
        total = total + w_m * joint
    if w_a != 0.0:
        total = total + w_a * adversarial
    return LossTerms(total, single, joint, adversarial, fused)
