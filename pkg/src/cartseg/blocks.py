"""Differentiable building blocks: residual blocks, strided resampling,
the attention-gated skip connection and a VNet-style encoder-decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CartsegError

PRELU_INIT = 0.25


def _init_conv(conv: nn.Module) -> None:
    # fan-in scaled uniform for weights and bias
    fan_in = conv.weight.shape[1] * math.prod(conv.weight.shape[2:])
    if isinstance(conv, nn.ConvTranspose3d):
        fan_in = conv.weight.shape[0] * math.prod(conv.weight.shape[2:])
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(conv.weight, -bound, bound)
    if conv.bias is not None:
        nn.init.uniform_(conv.bias, -bound, bound)


def conv3d(cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0) -> nn.Conv3d:
    conv = nn.Conv3d(cin, cout, kernel, stride=stride, padding=padding)
    _init_conv(conv)
    return conv


class ConvNormAct(nn.Sequential):
    """Convolution (or transposed convolution) followed by batch norm and PReLU."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0, transpose: bool = False):
        if transpose:
            conv = nn.ConvTranspose3d(cin, cout, kernel, stride=stride, padding=padding)
            _init_conv(conv)
        else:
            conv = conv3d(cin, cout, kernel, stride, padding)
        super().__init__()
        self.conv = conv
        self.norm = nn.BatchNorm3d(cout)
        self.act = nn.PReLU(cout, init=PRELU_INIT)


class ResidualBlock(nn.Module):
    """Two 3x3x3 convolutions with an identity shortcut added before the last activation."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv3d(channels, channels, 3, padding=1)
        self.norm1 = nn.BatchNorm3d(channels)
        self.act1 = nn.PReLU(channels, init=PRELU_INIT)
        self.conv2 = conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.BatchNorm3d(channels)
        self.act2 = nn.PReLU(channels, init=PRELU_INIT)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise CartsegError("channel-mismatch", f"block expects {self.channels} channels, got {x.shape[1]}")
        h = self.act1(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act2(h + x)


class AttentionGate(nn.Module):
    """Single-channel attention mask over low-level skip features.

    ``alpha = sigmoid(m(relu(c_l(I_l) + c_h(I_h_up))))`` and the merged output
    is ``cat(alpha * I_l, I_h_up)`` along channels.
    """

    def __init__(self, low_channels: int, high_channels: int, inter_channels: int | None = None):
        super().__init__()
        inter = inter_channels or low_channels
        self.c_l = conv3d(low_channels, inter, 1)
        self.c_h = conv3d(high_channels, inter, 1)
        self.m = conv3d(inter, 1, 1)

    def mask(self, low: torch.Tensor, high_up: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.m(F.relu(self.c_l(low) + self.c_h(high_up))))

    def forward(self, low: torch.Tensor, high_up: torch.Tensor, alpha: torch.Tensor | None = None) -> torch.Tensor:
        if low.shape[0] != high_up.shape[0] or low.shape[2:] != high_up.shape[2:]:
            raise CartsegError(
                "skip-shape-mismatch", f"low {tuple(low.shape)} vs high {tuple(high_up.shape)}"
            )
        if alpha is None:
            alpha = self.mask(low, high_up)
        return torch.cat([alpha * low, high_up], dim=1)


def attention_concat(gate: AttentionGate, low: torch.Tensor, high_up: torch.Tensor) -> torch.Tensor:
    return gate(low, high_up)


def plain_concat(low: torch.Tensor, high_up: torch.Tensor) -> torch.Tensor:
    if low.shape[0] != high_up.shape[0] or low.shape[2:] != high_up.shape[2:]:
        raise CartsegError("skip-shape-mismatch", f"low {tuple(low.shape)} vs high {tuple(high_up.shape)}")
    return torch.cat([low, high_up], dim=1)


class EncoderLevel(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.res0 = ResidualBlock(channels)
        self.down = ConvNormAct(channels, 2 * channels, 2, stride=2)


class DecoderLevel(nn.Module):
    def __init__(self, channels: int, attention: bool):
        super().__init__()
        self.up = ConvNormAct(2 * channels, channels, 2, stride=2, transpose=True)
        self.gate = AttentionGate(channels, channels) if attention else None
        self.merge = ConvNormAct(2 * channels, channels, 1)
        self.res0 = ResidualBlock(channels)

    def forward(self, skip: torch.Tensor, deeper: torch.Tensor) -> torch.Tensor:
        up = self.up(deeper)
        joined = self.gate(skip, up) if self.gate is not None else plain_concat(skip, up)
        return self.res0(self.merge(joined))


class EncoderDecoder(nn.Module):
    """VNet-like network; channel count doubles at each stride-2 down-sampling."""

    def __init__(self, levels: int, base_channels: int, in_channels: int, out_channels: int, attention=False):
        super().__init__()
        if not 1 <= levels <= 4:
            raise CartsegError("invalid-levels", f"levels must be in 1..4, got {levels}")
        if isinstance(attention, bool):
            attention = [attention] * levels
        attention = list(attention)
        if len(attention) != levels:
            raise CartsegError("invalid-levels", "need one attention flag per level")
        self.levels = levels
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.attention = attention
        self.stem = ConvNormAct(in_channels, base_channels, 3, padding=1)
        for lvl in range(levels):
            ch = base_channels * 2**lvl
            self.add_module(f"enc{lvl}", EncoderLevel(ch))
            self.add_module(f"dec{lvl}", DecoderLevel(ch, attention[lvl]))
        self.bottom = ResidualBlock(base_channels * 2**levels)
        self.head = conv3d(base_channels, out_channels, 1)

    def check_dims(self, spatial) -> None:
        k = 2**self.levels
        if any(int(d) % k for d in spatial):
            raise CartsegError("dims-not-divisible", f"spatial dims {tuple(spatial)} not divisible by {k}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Raw logits, same spatial size as ``x``."""
        self.check_dims(x.shape[2:])
        h = self.stem(x)
        skips = []
        for lvl in range(self.levels):
            enc = getattr(self, f"enc{lvl}")
            h = enc.res0(h)
            skips.append(h)
            h = enc.down(h)
        h = self.bottom(h)
        for lvl in reversed(range(self.levels)):
            h = getattr(self, f"dec{lvl}")(skips[lvl], h)
        return self.head(h)


def build_encoder_decoder(levels: int, base_channels: int, in_channels: int, out_channels: int, attention=False) -> EncoderDecoder:
    return EncoderDecoder(levels, base_channels, in_channels, out_channels, attention)
