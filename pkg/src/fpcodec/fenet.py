"""Fusion-and-encoding network: interleaves analysis with feature fusion,
mapping pyramid layers {p2..p5} to one latent at image stride 64.

Each encoding block halves the spatial dims, after which the result is
channel-concatenated with the next (smaller) pyramid layer:

    y = block4(cat(block3(cat(block2(cat(block1(p2), p3)), p4)), p5))
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import (
    ResidualBlock,
    ResidualBlockDown,
    SimplifiedAttention,
    conv2d,
)
from .errors import GeometryError


@dataclass
class FENetConfig:
    n_latent: int = 128
    in_channels: int = 256


def fuse(latent: torch.Tensor, p_next: torch.Tensor) -> torch.Tensor:
    """Channel-wise concatenation, latent channels first."""
    if latent.shape[-2:] != p_next.shape[-2:]:
        raise GeometryError(
            f"fusion needs equal spatial dims, got {tuple(latent.shape[-2:])} "
            f"vs {tuple(p_next.shape[-2:])}"
        )
    return torch.cat([latent, p_next], dim=-3)


class FENet(nn.Module):
    def __init__(self, config: FENetConfig):
        super().__init__()
        self.config = config
        n = config.n_latent
        c = config.in_channels
        self.block1 = nn.Sequential(ResidualBlockDown(c, n), ResidualBlock(n))
        self.block2 = nn.Sequential(
            ResidualBlockDown(n + c, n), ResidualBlock(n), SimplifiedAttention(n)
        )
        self.block3 = nn.Sequential(ResidualBlockDown(n + c, n), ResidualBlock(n))
        self.block4 = nn.Sequential(conv2d(n + c, n, 3, stride=2), SimplifiedAttention(n))

    def forward(
        self,
        p2: torch.Tensor,
        p3: torch.Tensor,
        p4: torch.Tensor,
        p5: torch.Tensor,
    ) -> torch.Tensor:
        y = self.block1(p2)
        y = self.block2(fuse(y, p3))
        y = self.block3(fuse(y, p4))
        y = self.block4(fuse(y, p5))
        return y
