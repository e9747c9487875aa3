"""Composite-topology spatial layer.

A global branch builds one attention-derived N x N topology per reduced channel,
modulates it by joint similarity and distinctiveness and mixes the channels up
to ``C_out``. A local branch gates the Gram energy of the pooled features with
the physical skeleton mask. The weighted sum of both topologies aggregates the
transformed features over joints.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteActivation, ShapeMismatch


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NonFiniteActivation(f"non-finite values in {name}")


def reduced_channels(in_channels: int, reduction: int) -> int:
    """Reduced width ``C_in / r``; an input width not divisible by ``r`` is kept whole."""
    if in_channels % reduction:
        return in_channels
    return in_channels // reduction


class CompositeTopologySpatial(nn.Module):
    """Input ``(B, C_in, T, N)``, output ``(B, C_out, T, N)``."""

    def __init__(self, in_channels: int, out_channels: int, mask, reduction: int = 8,
                 use_gsm: bool = True, use_lse: bool = True):
        super().__init__()
        if not (use_gsm or use_lse):
            raise ValueError("at least one of the global and local branches must be enabled")
        mask = torch.as_tensor(np.asarray(mask), dtype=torch.get_default_dtype())
        n = mask.shape[0]
        if mask.shape != (n, n):
            raise ShapeMismatch(f"mask must be square, got {tuple(mask.shape)}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.num_joints = n
        self.reduction = reduction
        self.rel_channels = reduced_channels(in_channels, reduction)
        self.use_gsm = use_gsm
        self.use_lse = use_lse
        cr = self.rel_channels

        self.register_buffer("mask", mask)
        # preprocessing
        self.omega = nn.Linear(in_channels, cr)
        self.lift = nn.Linear(n, n * n)
        # global spatial modulation; W_Q/W_K/W_V shared by all channels
        self.w_q = nn.Parameter(torch.empty(n, n))
        self.w_k = nn.Parameter(torch.empty(n, n))
        self.w_v = nn.Parameter(torch.empty(n, n))
        self.lambda_sim = nn.Parameter(torch.zeros(cr))
        self.lambda_diff = nn.Parameter(torch.zeros(cr))
        self.lambda_res = nn.Parameter(torch.zeros(cr))
        self.w_out = nn.Parameter(torch.empty(cr, out_channels))
        # local spatial enhancement
        hidden = max(1, n * cr // 2)
        self.gate = nn.Sequential(nn.Linear(n * cr, hidden), nn.ReLU(), nn.Linear(hidden, n * n))
        self.gamma = nn.Parameter(torch.zeros(()))
        # fusion and feature transform
        self.lambda_g = nn.Parameter(torch.ones(()))
        self.lambda_l = nn.Parameter(torch.full((), 0.1))
        self.transform = nn.Conv2d(in_channels, out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        n = self.num_joints
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.normal_(w, std=1.0 / math.sqrt(n))
        nn.init.normal_(self.w_out, std=1.0 / math.sqrt(self.rel_channels))
        for lin in (self.omega, self.lift, self.gate[0], self.gate[2]):
            lin.reset_parameters()
        nn.init.kaiming_normal_(self.transform.weight, mode="fan_out")
        nn.init.zeros_(self.transform.bias)
        with torch.no_grad():
            for p in (self.lambda_sim, self.lambda_diff, self.lambda_res, self.gamma):
                p.zero_()
            self.lambda_g.fill_(1.0)
            self.lambda_l.fill_(0.1)

    # -- pieces --------------------------------------------------------------

    def preprocess(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, C_in, T, N)`` -> pooled ``(B, C_r, N)`` and pairwise ``(B, C_r, N, N)``."""
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[3] != self.num_joints:
            raise ShapeMismatch(f"expected (B, {self.in_channels}, T, {self.num_joints}), got {tuple(x.shape)}")
        if x.shape[2] < 1:
            raise ShapeMismatch("need at least one frame")
        pooled = x.mean(dim=2).transpose(1, 2)                     # B, N, C_in
        x_bar = F.gelu(self.omega(pooled)).transpose(1, 2)         # B, C_r, N
        n = self.num_joints
        x_tilde = self.lift(x_bar).view(x.shape[0], self.rel_channels, n, n)
        return x_bar, x_tilde

    def gsm(self, x_tilde: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        """Per-channel modulated attention topologies mixed to ``(B, C_out, N, N)``."""
        n = self.num_joints
        if x_tilde.shape[1:] != (self.rel_channels, n, n):
            raise ShapeMismatch(f"expected (B, {self.rel_channels}, {n}, {n}), got {tuple(x_tilde.shape)}")
        q = self.w_q @ x_tilde
        k = self.w_k @ x_tilde
        v = self.w_v @ x_tilde
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(n), dim=-1)
        a_base = weights @ v
        q_unit = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        k_unit = k / k.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        a_sim = q_unit @ k_unit.transpose(-1, -2)
        sq_dist = (q.unsqueeze(-2) - k.unsqueeze(-3)).pow(2).sum(-1)
        a_diff = torch.sigmoid(sq_dist.clamp_min(1e-24).sqrt())
        lam = lambda p: p.view(1, -1, 1, 1)  # noqa: E731
        a_gi = a_base * (1.0 + lam(self.lambda_sim) * a_sim) + lam(self.lambda_diff) * a_diff
        a_gi = a_gi + lam(self.lambda_res) * x_tilde
        a_g = torch.einsum("binm,io->bonm", a_gi, self.w_out)
        _check_finite("global topology", weights, a_base, a_sim, a_diff, a_g)
        if activations is not None:
            activations.update(attention=weights, A_base=a_base, A_sim=a_sim, A_diff=a_diff,
                               A_g_per_channel=a_gi, A_g=a_g)
        return a_g

    def lse(self, x_bar: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        """Masked, gated Gram-energy topology ``(B, N, N)``."""
        n = self.num_joints
        if x_bar.shape[1:] != (self.rel_channels, n):
            raise ShapeMismatch(f"expected (B, {self.rel_channels}, {n}), got {tuple(x_bar.shape)}")
        energy = x_bar.transpose(1, 2) @ x_bar
        gate = torch.sigmoid(self.gate(x_bar.flatten(1))).view(-1, n, n)
        a_l = self.mask * gate * F.relu(energy) + self.gamma * self.mask
        _check_finite("local topology", a_l)
        if activations is not None:
            activations.update(E=energy, G=gate, A_l=a_l)
        return a_l

    def topology(self, x: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        """Fused topology ``A_s`` of shape ``(B, C_out, N, N)``."""
        x_bar, x_tilde = self.preprocess(x)
        if activations is not None:
            activations.update(X_bar=x_bar, X_tilde=x_tilde)
        b, n = x.shape[0], self.num_joints
        a_s = x.new_zeros(b, self.out_channels, n, n)
        if self.use_gsm:
            a_s = a_s + self.lambda_g * self.gsm(x_tilde, activations)
        if self.use_lse:
            a_s = a_s + self.lambda_l * self.lse(x_bar, activations).unsqueeze(1)
        if activations is not None:
            activations["A_s"] = a_s
        return a_s

    def forward(self, x: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        a_s = self.topology(x, activations)
        features = self.transform(x)
        z = torch.einsum("bcnm,bctm->bctn", a_s, features)
        if activations is not None:
            activations["Z_s"] = z
        return z

    @torch.no_grad()
    def permutation_shared_init(self, seed: int = 0) -> None:
        """Initialize so that relabeling joints commutes with the layer.

        The joint-mixing parameters (W_Q, W_K, W_V, the pairwise lift and the
        gate) are restricted to forms built from the identity and the all-ones
        matrix, which every joint permutation preserves.
        """
        g = torch.Generator().manual_seed(seed)
        n = self.num_joints
        r = lambda: float(torch.randn((), generator=g))  # noqa: E731
        eye, ones = torch.eye(n), torch.ones(n, n)
        for w in (self.w_q, self.w_k, self.w_v):
            w.copy_(r() * eye + r() / n * ones)
        # lift[(a, b), m] = alpha [a=b=m] + beta [a=m] + beta' [b=m] + c
        a_idx = torch.arange(n).repeat_interleave(n)
        b_idx = torch.arange(n).repeat(n)
        m_idx = torch.arange(n)
        alpha, beta, beta2, c = r(), r(), r(), r() / n
        weight = (alpha * ((a_idx[:, None] == m_idx) & (b_idx[:, None] == m_idx)).float()
                  + beta * (a_idx[:, None] == m_idx).float()
                  + beta2 * (b_idx[:, None] == m_idx).float() + c)
        self.lift.weight.copy_(weight)
        self.lift.bias.copy_((r() * eye + r() * ones).flatten())
        self.gate[2].weight.zero_()
        self.gate[2].bias.fill_(r())


class StaticGraphConv(nn.Module):
    """Fixed-topology graph convolution over the normalized physical adjacency."""

    def __init__(self, in_channels: int, out_channels: int, mask):
        super().__init__()
        mask = np.asarray(mask, dtype=np.float64)
        deg = mask.sum(1)
        norm = mask / np.sqrt(deg[:, None] * deg[None, :])
        self.register_buffer("adjacency", torch.as_tensor(norm, dtype=torch.get_default_dtype()))
        self.transform = nn.Conv2d(in_channels, out_channels, 1)
        self.num_joints = mask.shape[0]
        self.out_channels = out_channels

    def topology(self, x: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        a_s = self.adjacency.expand(x.shape[0], self.out_channels, -1, -1)
        if activations is not None:
            activations["A_s"] = a_s
        return a_s

    def forward(self, x: torch.Tensor, activations: Optional[dict] = None) -> torch.Tensor:
        return torch.einsum("nm,bctm->bctn", self.adjacency, self.transform(x))
