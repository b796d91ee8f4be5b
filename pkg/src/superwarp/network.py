"""Registration U-Nets: the multi-scale warping network and a channel-concat baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fieldcore import compose_fields_batched, resize_batched, warp_batched

__all__ = [
    "DEFAULT_FEATURES",
    "ModelConfig",
    "SuperWarpNet",
    "ConcatUNet",
    "hadamard_pair",
    "build_model",
    "count_parameters",
]

DEFAULT_FEATURES = (24, 32, 48, 64, 96, 128, 192)
NEGATIVE_SLOPE = 0.2


@dataclass
class ModelConfig:
    levels: int = 7
    features_per_level: Optional[list[int]] = None
    convs_per_level: int = 2
    multi_scale_warp: bool = True
    accumulate_mode: str = "additive"
    spatial_dims: int = 2
    architecture: str = "superwarp"

    def __post_init__(self):
        if self.features_per_level is None:
            if self.levels > len(DEFAULT_FEATURES):
                raise ValueError(f"no default features for {self.levels} levels")
            self.features_per_level = list(DEFAULT_FEATURES[: self.levels])
        self.features_per_level = [int(f) for f in self.features_per_level]
        self.validate()

    def validate(self):
        if self.levels < 2:
            raise ValueError("a registration U-Net needs at least 2 levels")
        if len(self.features_per_level) != self.levels:
            raise ValueError(
                f"features_per_level has {len(self.features_per_level)} entries for {self.levels} levels"
            )
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")
        if self.accumulate_mode not in ("additive", "compositional"):
            raise ValueError(f"unknown accumulate_mode {self.accumulate_mode!r}")
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        if self.architecture not in ("superwarp", "baseline"):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    def check_input_shape(self, shape) -> None:
        if len(shape) != self.spatial_dims:
            raise ValueError(f"expected {self.spatial_dims}-D images, got shape {tuple(shape)}")
        step = 2 ** (self.levels - 1)
        if any(s % step for s in shape):
            raise ValueError(
                f"image extents {tuple(shape)} must be divisible by {step} for {self.levels} levels"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def hadamard_pair(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Unnormalised 2-point Hadamard transform ``(a + b, a - b)``."""
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b, a - b


def _conv(dims: int, cin: int, cout: int) -> nn.Module:
    conv = getattr(nn, f"Conv{dims}d")(cin, cout, kernel_size=3, padding=1)
    # default init shrinks activations ~10x over a 5-level encoder
    nn.init.kaiming_normal_(conv.weight, a=NEGATIVE_SLOPE, nonlinearity="leaky_relu")
    nn.init.zeros_(conv.bias)
    return conv


class ConvBlock(nn.Sequential):
    def __init__(self, dims: int, cin: int, cout: int, n: int):
        layers = []
        for i in range(n):
            layers += [_conv(dims, cin if i == 0 else cout, cout), nn.LeakyReLU(NEGATIVE_SLOPE)]
        super().__init__(*layers)


class DeformationBlock(nn.Sequential):
    """conv -> activation -> conv to ``dims`` channels, last layer zero-initialised."""

    def __init__(self, dims: int, cin: int, width: int):
        head = _conv(dims, width, dims)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
        super().__init__(_conv(dims, cin, width), nn.LeakyReLU(NEGATIVE_SLOPE), head)


def _upsample(x: torch.Tensor) -> torch.Tensor:
    mode = "bilinear" if x.ndim == 4 else "trilinear"
    return F.interpolate(x, scale_factor=2, mode=mode, align_corners=False)


def _downsample(x: torch.Tensor) -> torch.Tensor:
    return (F.avg_pool2d if x.ndim == 4 else F.avg_pool3d)(x, 2)


class _UNetTrunk(nn.Module):
    """Encoder/decoder shared by both architectures; returns per-level decoder features."""

    def __init__(self, cfg: ModelConfig, in_channels: int, extra_decoder_convs: int = 0):
        super().__init__()
        dims, feats, n = cfg.spatial_dims, cfg.features_per_level, cfg.convs_per_level
        self.down = nn.ModuleList()
        cin = in_channels
        for f in feats:
            self.down.append(ConvBlock(dims, cin, f, n))
            cin = f
        self.up = nn.ModuleList(
            ConvBlock(dims, feats[i + 1] + feats[i], feats[i], n + extra_decoder_convs)
            for i in range(cfg.levels - 1)
        )

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = _downsample(x)
            x = block(x)
            skips.append(x)
        return skips

    def decode(self, skips: list[torch.Tensor]) -> list[torch.Tensor]:
        """Upward path; returns features coarsest first."""
        x = skips[-1]
        out = [x]
        for i in reversed(range(len(self.up))):
            x = self.up[i](torch.cat([_upsample(x), skips[i]], dim=1))
            out.append(x)
        return out


class SuperWarpNet(nn.Module):
    """U-Net that warps moving-image features by the running field at every decoder level.

    Fixed and moving images share the trunk through the batch axis, so their
    features never mix until the deformation blocks.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = _UNetTrunk(cfg, in_channels=1)
        feats = cfg.features_per_level
        # index i holds the block for resolution level i (0 = full resolution)
        self.deform = nn.ModuleList(
            DeformationBlock(cfg.spatial_dims, 2 * f, f) for f in feats
        )

    def _batch(self, f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        if f0.shape != f1.shape:
            raise ValueError(f"image shapes differ: {tuple(f0.shape)} vs {tuple(f1.shape)}")
        if f0.ndim == self.cfg.spatial_dims:
            f0, f1 = f0[None, None], f1[None, None]
        self.cfg.check_input_shape(f0.shape[2:])
        return torch.cat([f0, f1], dim=0)

    def encode(self, f0: torch.Tensor, f1: torch.Tensor):
        """Feature pyramids (finest first) of both images, computed as one batch."""
        x = self._batch(f0, f1)
        n = x.shape[0] // 2
        skips = self.trunk.encode(x)
        return [s[:n] for s in skips], [s[n:] for s in skips]

    def decode_level(
        self,
        level: int,
        feat0: torch.Tensor,
        feat1: torch.Tensor,
        prev_field: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Residual and accumulated field at one level.

        ``prev_field`` must already be at this level's resolution and in its
        voxel units.
        """
        if prev_field is not None:
            if prev_field.shape[2:] != feat1.shape[2:]:
                raise ValueError(
                    f"field at {tuple(prev_field.shape[2:])} used on features at {tuple(feat1.shape[2:])}"
                )
            if self.cfg.multi_scale_warp:
                feat1 = warp_batched(feat1, prev_field)
        total, diff = hadamard_pair(feat0, feat1)
        residual = self.deform[level](torch.cat([total, diff], dim=1))
        if prev_field is None:
            return residual, residual
        if self.cfg.accumulate_mode == "additive":
            return residual, prev_field + residual
        return residual, compose_fields_batched(prev_field, residual)

    def forward(self, f0: torch.Tensor, f1: torch.Tensor) -> list[torch.Tensor]:
        x = self._batch(f0, f1)
        n = x.shape[0] // 2
        feats = self.trunk.decode(self.trunk.encode(x))
        fields = []
        prev = None
        for k, feat in enumerate(feats):
            level = self.cfg.levels - 1 - k
            if prev is not None:
                prev = resize_batched(prev, 2)
            _, prev = self.decode_level(level, feat[:n], feat[n:], prev)
            fields.append(prev)
        return fields


class ConcatUNet(nn.Module):
    """Baseline: both images stacked as channels of one input, one full-resolution field.

    Two extra convolutions per decoder level and a bottleneck block stand in
    for the warping network's deformation blocks, keeping parameter counts
    comparable.
    """

    def __init__(self, cfg: ModelConfig, extra_convs: int = 2):
        super().__init__()
        self.cfg = cfg
        self.trunk = _UNetTrunk(cfg, in_channels=2, extra_decoder_convs=extra_convs)
        deepest = cfg.features_per_level[-1]
        self.bottleneck = ConvBlock(cfg.spatial_dims, deepest, deepest, extra_convs)
        f = cfg.features_per_level[0]
        self.head = DeformationBlock(cfg.spatial_dims, f, f)

    def forward(self, f0: torch.Tensor, f1: torch.Tensor) -> list[torch.Tensor]:
        if f0.shape != f1.shape:
            raise ValueError(f"image shapes differ: {tuple(f0.shape)} vs {tuple(f1.shape)}")
        if f0.ndim == self.cfg.spatial_dims:
            f0, f1 = f0[None, None], f1[None, None]
        self.cfg.check_input_shape(f0.shape[2:])
        skips = self.trunk.encode(torch.cat([f0, f1], dim=1))
        skips[-1] = self.bottleneck(skips[-1])
        feats = self.trunk.decode(skips)
        return [self.head(feats[-1])]


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.architecture == "baseline":
        return ConcatUNet(cfg)
    return SuperWarpNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
