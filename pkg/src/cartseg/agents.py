"""Per-cartilage segmentation agents and the single-agent loss."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .blocks import build_encoder_decoder
from .errors import CartsegError
from .roi import RoiSample
from .volume import Cartilage, Volume

BCE_EPS = 1e-7


class AgentNetwork(nn.Module):
    """Attention-gated encoder-decoder producing foreground probabilities inside one ROI."""

    def __init__(self, cartilage: Cartilage, levels: int = 2, base_channels: int = 16, attention=True):
        super().__init__()
        self.cartilage = Cartilage(cartilage)
        self.net = build_encoder_decoder(levels, base_channels, 1, 1, attention=attention)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))

    @property
    def final_layer(self) -> nn.Conv3d:
        return self.net.head


class AgentTeam(nn.ModuleDict):
    """The three agents, keyed ``fc``/``tc``/``pc``; they share architecture, not parameters."""

    def __init__(self, levels: int = 2, base_channels: int = 16, attention=True):
        super().__init__({c.key: AgentNetwork(c, levels, base_channels, attention) for c in Cartilage})

    def agent(self, cartilage: Cartilage) -> AgentNetwork:
        return self[Cartilage(cartilage).key]


def _as_input(roi, like: nn.Module) -> torch.Tensor:
    param = next(like.parameters())
    if isinstance(roi, Volume):
        roi = roi.array
    if isinstance(roi, np.ndarray):
        roi = torch.from_numpy(np.array(roi))
    roi = roi.to(param.dtype)
    while roi.dim() < 5:
        roi = roi.unsqueeze(0)
    return roi


def agent_forward(agent: AgentNetwork, roi) -> torch.Tensor:
    """``(1, 1, *roi.dims)`` probabilities; threshold at 0.5 for the binary mask."""
    x = _as_input(roi, agent)
    return agent(x)


def binary_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy with ``pred`` clamped to ``[1e-7, 1 - 1e-7]``."""
    if not torch.is_tensor(target):
        target = torch.as_tensor(np.asarray(target))
    target = target.to(pred.dtype)
    if pred.shape != target.shape:
        if pred.numel() == target.numel() and pred.squeeze().shape == target.squeeze().shape:
            target = target.reshape(pred.shape)
        else:
            raise CartsegError("loss-shape-mismatch", f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def single_agent_loss(agent: AgentNetwork, sample: RoiSample, pred: torch.Tensor | None = None) -> torch.Tensor:
    """Agent loss inside its ROI; pass ``pred`` to reuse an existing forward pass."""
    if sample.cartilage != agent.cartilage:
        raise CartsegError(
            "wrong-agent-for-sample", f"{agent.cartilage.name} agent given a {sample.cartilage.name} sample"
        )
    if pred is None:
        pred = agent_forward(agent, sample.image_roi)
    target = torch.from_numpy(sample.label_roi.array.astype(np.float32))
    return binary_ce(pred, target)
