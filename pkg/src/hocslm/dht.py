"""Dual-path temporal layer: frame-to-frame attention in parallel with a
four-branch temporal convolution bank, fused by two learnable scalars."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from .errors import ShapeMismatch


class GlobalTemporalAttention(nn.Module):
    def __init__(self, channels: int, out_channels: Optional[int] = None):
        super().__init__()
        out_channels = out_channels or channels
        self.channels = channels
        self.phi_q = nn.Conv2d(channels, channels, 1)
        self.phi_k = nn.Conv2d(channels, channels, 1)
        self.phi_v = nn.Conv2d(channels, channels, 1)
        # brings the attended features to the width of the convolution bank
        self.proj = nn.Conv2d(channels, out_channels, 1)

    def attend(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``S_g`` (B, C, T, N) and the row-stochastic map ``S`` (B, T, T)."""
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected (B, {self.channels}, T, N), got {tuple(x.shape)}")
        q, k, v = self.phi_q(x), self.phi_k(x), self.phi_v(x)
        c, n = x.shape[1], x.shape[3]
        logits = torch.einsum("bcin,bcjn->bij", q, k) / (math.sqrt(c) * n)
        s = torch.softmax(logits, dim=-1)
        return torch.einsum("bij,bcjn->bcin", s, v), s

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.attend(x)[0])


class LocalTemporalConv(nn.Module):
    """Four branches of ``C_out / 4`` channels each, all length-preserving."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels % 4:
            raise ValueError(f"out_channels must be divisible by 4, got {out_channels}")
        bc = out_channels // 4
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branch1 = nn.Sequential(nn.Conv2d(in_channels, bc, 1),
                                     nn.Conv2d(bc, bc, (5, 1), padding=(2, 0)))
        self.branch2 = nn.Sequential(nn.Conv2d(in_channels, bc, 1),
                                     nn.Conv2d(bc, bc, (5, 1), padding=(4, 0), dilation=(2, 1)))
        self.branch3 = nn.Sequential(nn.Conv2d(in_channels, bc, 1),
                                     nn.MaxPool2d((3, 1), stride=1, padding=(1, 0)))
        self.branch4 = nn.Conv2d(in_channels, bc, 1)

    def branches(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (B, {self.in_channels}, T, N), got {tuple(x.shape)}")
        return [self.branch1(x), self.branch2(x), self.branch3(x), self.branch4(x)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat(self.branches(x), dim=1)


class DualPathTemporal(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, use_gta: bool = True, use_ltc: bool = True):
        super().__init__()
        if not (use_gta or use_ltc):
            raise ValueError("at least one of the global and local temporal paths must be enabled")
        self.use_gta = use_gta
        self.use_ltc = use_ltc
        self.out_channels = out_channels
        self.gta = GlobalTemporalAttention(in_channels, out_channels) if use_gta else None
        self.ltc = LocalTemporalConv(in_channels, out_channels) if use_ltc else None
        self.lambda_g = nn.Parameter(torch.ones(()))
        self.lambda_l = nn.Parameter(torch.ones(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = 0.0
        if self.use_gta:
            out = out + self.lambda_g * self.gta(x)
        if self.use_ltc:
            out = out + self.lambda_l * self.ltc(x)
        return out


class PlainTemporalConv(nn.Module):
    """Single K=5 temporal convolution used when the dual-path layer is ablated."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, (5, 1), padding=(2, 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)
