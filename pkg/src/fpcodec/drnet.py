"""Decoding-and-reconstruction network: maps the decoded latent to the
reconstructed pyramid {p2..p6} through per-layer upsampling branches and a
feature-mixing pathway.

The default bottom-up pathway reconstructs p2 first and propagates it
upward; the top-down variant reconstructs p5 first and propagates
downward using transposed convolutions in the mixing blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import (
    ResidualBlock,
    ResidualBlockUp,
    SimplifiedAttention,
    conv2d,
    _init_conv,
)
from .errors import GeometryError

BOTTOM_UP = "bottom_up"
TOP_DOWN = "top_down"


@dataclass
class DRNetConfig:
    n_latent: int = 128
    out_channels: int = 256
    pathway: str = BOTTOM_UP


def _branch(n: int, out_channels: int, level: int) -> nn.Sequential:
    """Upsampling branch for one pyramid level: (6 - level) doubling
    stages, attention inside the two highest-resolution branches, and a
    final projection to the pyramid channel count."""
    stages = []
    n_up = 6 - level
    attention_after = {2: 2, 3: 1}.get(level)
    for stage in range(n_up):
        stages += [ResidualBlockUp(n, n), ResidualBlock(n)]
        if attention_after == stage + 1:
            stages.append(SimplifiedAttention(n))
    stages.append(conv2d(n, out_channels, 3))
    return nn.Sequential(*stages)


class FeatureMixing(nn.Module):
    """Refine a lower-resolution map with its higher-resolution neighbour:
    out = p_low + conv3x3(cat(conv5x5_stride2(p_high), p_low))."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = conv2d(channels, channels, 5, stride=2)
        self.mix = conv2d(2 * channels, channels, 3)

    def forward(self, p_high: torch.Tensor, p_low: torch.Tensor) -> torch.Tensor:
        if p_high.shape[-1] != 2 * p_low.shape[-1] or p_high.shape[-2] != 2 * p_low.shape[-2]:
            raise GeometryError(
                f"mixing needs p_high at 2x p_low dims, got "
                f"{tuple(p_high.shape[-2:])} vs {tuple(p_low.shape[-2:])}"
            )
        return p_low + self.mix(torch.cat([self.down(p_high), p_low], dim=-3))


class FeatureMixingTopDown(nn.Module):
    """Top-down variant: upsample the lower-resolution map with a
    transposed 5x5 stride-2 convolution and refine the higher-resolution
    one: out = p_high + conv3x3(cat(tconv5x5_stride2(p_low), p_high))."""

    def __init__(self, channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(
            channels, channels, 5, stride=2, padding=2, output_padding=1
        )
        _init_conv(self.up)
        self.mix = conv2d(2 * channels, channels, 3)

    def forward(self, p_low: torch.Tensor, p_high: torch.Tensor) -> torch.Tensor:
        if p_high.shape[-1] != 2 * p_low.shape[-1] or p_high.shape[-2] != 2 * p_low.shape[-2]:
            raise GeometryError(
                f"mixing needs p_high at 2x p_low dims, got "
                f"{tuple(p_high.shape[-2:])} vs {tuple(p_low.shape[-2:])}"
            )
        return p_high + self.mix(torch.cat([self.up(p_low), p_high], dim=-3))


class DRNet(nn.Module):
    def __init__(self, config: DRNetConfig):
        super().__init__()
        if config.pathway not in (BOTTOM_UP, TOP_DOWN):
            raise ValueError(f"unknown pathway {config.pathway!r}")
        self.config = config
        n, c = config.n_latent, config.out_channels
        self.attention = SimplifiedAttention(n)
        self.branches = nn.ModuleDict(
            {str(lv): _branch(n, c, lv) for lv in (2, 3, 4, 5)}
        )
        if config.pathway == BOTTOM_UP:
            self.mixing = nn.ModuleDict({str(lv): FeatureMixing(c) for lv in (3, 4, 5)})
        else:
            self.mixing = nn.ModuleDict(
                {str(lv): FeatureMixingTopDown(c) for lv in (2, 3, 4)}
            )

    def forward(self, y_hat: torch.Tensor) -> dict[int, torch.Tensor]:
        """Reconstruct layers {2..6} at padded dims (p6 derived from p5)."""
        attended = self.attention(y_hat)
        pre = {lv: self.branches[str(lv)](attended) for lv in (2, 3, 4, 5)}
        out: dict[int, torch.Tensor] = {}
        if self.config.pathway == BOTTOM_UP:
            out[2] = pre[2]
            for lv in (3, 4, 5):
                out[lv] = self.mixing[str(lv)](out[lv - 1], pre[lv])
        else:
            out[5] = pre[5]
            for lv in (4, 3, 2):
                out[lv] = self.mixing[str(lv)](out[lv + 1], pre[lv])
        out[6] = out[5][..., ::2, ::2]
        return out


def crop_layers(
    layers: dict[int, torch.Tensor], original_dims: dict[int, tuple[int, int]]
) -> dict[int, torch.Tensor]:
    """Crop reconstructed layers back to pre-padding dims; layer 6 is
    re-derived from the cropped layer 5."""
    out = {}
    for lv in (2, 3, 4, 5):
        h, w = original_dims[lv]
        out[lv] = layers[lv][..., :h, :w]
    out[6] = out[5][..., ::2, ::2]
    return out
