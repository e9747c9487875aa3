"""HGLNet skeleton encoder: residual stacks of spatial + temporal blocks,
global average pooling and a linear classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cts import CompositeTopologySpatial, StaticGraphConv
from .dht import DualPathTemporal, PlainTemporalConv
from .errors import ConfigError, NonFiniteActivation, ShapeMismatch
from .skeleton_io import NTU_EDGES, NUM_NTU_JOINTS, physical_mask

STRATEGIES = ("T0", "T1", "T2", "T3", "T4")


@dataclass
class AblationConfig:
    """Component switches. ``use_cts``/``use_dht`` false fall back to a fixed-topology
    graph convolution and a single temporal convolution (the baseline block)."""

    use_gsm: bool = True
    use_lse: bool = True
    use_gta: bool = True
    use_ltc: bool = True
    use_ssf: bool = True
    ssf_strategy: str = "T3"
    use_cts: bool = True
    use_dht: bool = True

    def validate(self) -> "AblationConfig":
        if self.ssf_strategy not in STRATEGIES:
            raise ConfigError(f"unknown SSF strategy {self.ssf_strategy!r}")
        if self.use_cts and not (self.use_gsm or self.use_lse):
            raise ConfigError("the spatial layer needs GSM or LSE enabled")
        if self.use_dht and not (self.use_gta or self.use_ltc):
            raise ConfigError("the temporal layer needs GTA or LTC enabled")
        if self.ssf_strategy == "T0" and self.use_ssf:
            raise ConfigError("strategy T0 trains without SSF; set use_ssf=False")
        if self.ssf_strategy != "T0" and not self.use_ssf:
            raise ConfigError(f"strategy {self.ssf_strategy} needs use_ssf=True")
        return self


@dataclass
class BackboneConfig:
    block_widths: list[tuple[int, int, int]]
    num_classes: int
    num_joints: int = NUM_NTU_JOINTS
    window: int = 64
    in_channels: int = 3
    reduction: int = 8
    edges: list[tuple[int, int]] = field(default_factory=lambda: list(NTU_EDGES))
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.block_widths = [tuple(int(v) for v in w) for w in self.block_widths]
        self.edges = [tuple(int(v) for v in e) for e in self.edges]
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)

    def validate(self) -> "BackboneConfig":
        if not self.block_widths:
            raise ConfigError("need at least one block")
        if self.block_widths[0][0] != self.in_channels:
            raise ConfigError(f"first block must take {self.in_channels} channels")
        for (_, prev_out, _), (cin, cout, stride) in zip(self.block_widths, self.block_widths[1:]):
            if prev_out != cin:
                raise ConfigError(f"block widths do not chain: {prev_out} -> {cin}")
        for _, cout, stride in self.block_widths:
            if stride not in (1, 2):
                raise ConfigError(f"temporal stride must be 1 or 2, got {stride}")
            if self.ablation.use_dht and self.ablation.use_ltc and cout % 4:
                raise ConfigError(f"block width {cout} is not divisible by 4")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        self.ablation.validate()
        return self

    @property
    def feature_dim(self) -> int:
        return self.block_widths[-1][1]

    def output_frames(self, frames: Optional[int] = None) -> int:
        t = self.window if frames is None else frames
        for _, _, stride in self.block_widths:
            t = -(-t // stride)
        return t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_widths"] = [list(w) for w in self.block_widths]
        d["edges"] = [list(e) for e in self.edges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["ablation"] = AblationConfig(**d.get("ablation", {}))
        return cls(**d)


def default_preset(num_classes: int, ablation: Optional[AblationConfig] = None, window: int = 64) -> BackboneConfig:
    """Ten blocks in three stages, stride 2 on entering stages two and three."""
    widths = [(3, 64, 1), (64, 64, 1), (64, 64, 1), (64, 64, 1),
              (64, 128, 2), (128, 128, 1), (128, 128, 1),
              (128, 256, 2), (256, 256, 1), (256, 256, 1)]
    return BackboneConfig(widths, num_classes, window=window, ablation=ablation or AblationConfig())


def desk_preset(num_classes: int, ablation: Optional[AblationConfig] = None, window: int = 64) -> BackboneConfig:
    """Four blocks, widths 16/16/32/32."""
    widths = [(3, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1)]
    return BackboneConfig(widths, num_classes, window=window, ablation=ablation or AblationConfig())


PRESETS = {"default": default_preset, "desk": desk_preset}


class HGLBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, mask, ablation: AblationConfig,
                 reduction: int = 8):
        super().__init__()
        if ablation.use_cts:
            self.spatial = CompositeTopologySpatial(in_channels, out_channels, mask, reduction,
                                                    use_gsm=ablation.use_gsm, use_lse=ablation.use_lse)
        else:
            self.spatial = StaticGraphConv(in_channels, out_channels, mask)
        if ablation.use_dht:
            self.temporal = DualPathTemporal(out_channels, out_channels, ablation.use_gta, ablation.use_ltc)
        else:
            self.temporal = PlainTemporalConv(out_channels, out_channels)
        self.bn_spatial = nn.BatchNorm2d(out_channels)
        self.bn_temporal = nn.BatchNorm2d(out_channels)
        self.stride = stride
        if in_channels == out_channels and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Conv2d(in_channels, out_channels, 1, stride=(stride, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn_spatial(self.spatial(x)))
        y = self.temporal(y)
        if self.stride > 1:
            y = y[:, :, ::self.stride]
        y = self.bn_temporal(y)
        return F.relu(y + self.residual(x))


class HGLNet(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config.validate()
        mask = physical_mask(config.edges, config.num_joints)
        self.data_bn = nn.BatchNorm1d(config.in_channels * config.num_joints)
        self.blocks = nn.ModuleList(
            HGLBlock(cin, cout, stride, mask, config.ablation, config.reduction)
            for cin, cout, stride in config.block_widths
        )
        self.fc = nn.Linear(config.feature_dim, config.num_classes)
        nn.init.normal_(self.fc.weight, std=(2.0 / config.num_classes) ** 0.5)
        nn.init.zeros_(self.fc.bias)

    def _fold(self, x: torch.Tensor) -> tuple[torch.Tensor, int]:
        cfg = self.config
        if x.dim() == 5:
            b, c, t, n, m = x.shape
            x = x.permute(0, 4, 1, 2, 3).reshape(b * m, c, t, n)
        elif x.dim() == 4:
            m = 1
        else:
            raise ShapeMismatch(f"expected (B, C, T, N[, M]) input, got {tuple(x.shape)}")
        if x.shape[1] != cfg.in_channels or x.shape[3] != cfg.num_joints:
            raise ShapeMismatch(f"expected {cfg.in_channels} channels and {cfg.num_joints} joints, "
                                f"got {tuple(x.shape)}")
        return x, m

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Final block features ``(B, D, T', N)``, bodies mean-pooled."""
        x, m = self._fold(x)
        bm, c, t, n = x.shape
        x = self.data_bn(x.permute(0, 1, 3, 2).reshape(bm, c * n, t)).view(bm, c, n, t).permute(0, 1, 3, 2)
        for block in self.blocks:
            x = block(x)
        if m > 1:
            x = x.view(bm // m, m, *x.shape[1:]).mean(1)
        return x

    @staticmethod
    def semantic_vector(features: torch.Tensor) -> torch.Tensor:
        """Mean over time and joints: ``(B, D, T', N) -> (B, D)``."""
        return features.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.encode(x)
        logits = self.fc(self.semantic_vector(features))
        if not torch.isfinite(logits).all():
            raise NonFiniteActivation("non-finite logits")
        return features, logits

    def extract_semantic_vector(self, x: torch.Tensor) -> torch.Tensor:
        return self.semantic_vector(self.encode(x))

    def encoder_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("fc.")]

    def classifier_parameters(self):
        return list(self.fc.parameters())

    def encoder_modules(self) -> Sequence[nn.Module]:
        return [self.data_bn, self.blocks]

    def reset_encoder(self, seed: Optional[int] = None) -> None:
        """Re-draw every encoder weight (classifier untouched)."""
        if seed is not None:
            torch.manual_seed(seed)
        for module in self.encoder_modules():
            for sub in module.modules():
                if sub is not self and hasattr(sub, "reset_parameters"):
                    sub.reset_parameters()
                if hasattr(sub, "reset_running_stats"):
                    sub.reset_running_stats()

    def spatial_topology(self, x: torch.Tensor, block: int = 0) -> torch.Tensor:
        """Fused topology ``(B, C_out, N, N)`` of one block for input ``x``."""
        x, _ = self._fold(x)
        bm, c, t, n = x.shape
        x = self.data_bn(x.permute(0, 1, 3, 2).reshape(bm, c * n, t)).view(bm, c, n, t).permute(0, 1, 3, 2)
        for i, blk in enumerate(self.blocks):
            if i == block:
                return blk.spatial.topology(x)
            x = blk(x)
        raise IndexError(f"block {block} out of range")
