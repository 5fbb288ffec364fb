"""Neural building blocks shared by the encoder and decoder transforms:
residual blocks (plain / down / up), GDN / IGDN, simplified attention,
causal masked convolution, and subpixel upsampling.

All convolutions use "same" padding, so spatial dims follow ceil(in / stride).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.01
GDN_BETA_MIN = 1e-6


def _init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    """Truncated-normal init scaled by fan-in; zero bias."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    std = 1.0 / math.sqrt(fan_in)
    nn.init.trunc_normal_(conv.weight, std=std, a=-2 * std, b=2 * std)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def conv2d(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1) -> nn.Conv2d:
    """Same-padded convolution: output dims are ceil(input / stride)."""
    return _init_conv(
        nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            padding=kernel_size // 2,
        )
    )


class GDN(nn.Module):
    """Generalized divisive normalization.

    y_c = x_c / sqrt(beta_c + sum_j gamma_cj * x_j^2), or the inverse
    (multiplicative) form when ``inverse=True``. beta and gamma are stored
    through a squared-offset reparameterization so beta > 0 and gamma >= 0
    always hold.
    """

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        beta = torch.ones(channels)
        gamma = 0.1 * torch.eye(channels)
        self._beta_param = nn.Parameter(torch.sqrt(beta - GDN_BETA_MIN))
        self._gamma_param = nn.Parameter(torch.sqrt(gamma))

    @property
    def beta(self) -> torch.Tensor:
        return self._beta_param**2 + GDN_BETA_MIN

    @property
    def gamma(self) -> torch.Tensor:
        return self._gamma_param**2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        weight = self.gamma.view(c, c, 1, 1)
        norm = torch.sqrt(F.conv2d(x**2, weight, self.beta))
        return x * norm if self.inverse else x / norm


class ResidualBlock(nn.Module):
    """y = x + LeakyReLU(conv3x3(LeakyReLU(conv3x3(x)))); dims preserved."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv2d(channels, channels, 3)
        self.conv2 = conv2d(channels, channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        h = F.leaky_relu(self.conv2(h), LEAKY_SLOPE)
        return x + h


class ResidualBlockDown(nn.Module):
    """Downsampling residual block: stride-2 main path ending in GDN,
    stride-2 1x1 convolution on the skip path. Dims are halved (ceil)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = conv2d(in_channels, out_channels, 3, stride=2)
        self.conv2 = conv2d(out_channels, out_channels, 3)
        self.gdn = GDN(out_channels)
        self.skip = conv2d(in_channels, out_channels, 1, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        h = self.gdn(self.conv2(h))
        return h + self.skip(x)


class SubpixelConv2d(nn.Module):
    """3x3 convolution to 4x channels followed by 2x pixel shuffle."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = conv2d(in_channels, out_channels * 4, 3)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.conv(x))


class ResidualBlockUp(nn.Module):
    """Upsampling residual block: subpixel main path ending in IGDN,
    subpixel skip path. Dims are doubled."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = SubpixelConv2d(in_channels, out_channels)
        self.conv = conv2d(out_channels, out_channels, 3)
        self.igdn = GDN(out_channels, inverse=True)
        self.skip = SubpixelConv2d(in_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.up(x), LEAKY_SLOPE)
        h = self.igdn(self.conv(h))
        return h + self.skip(x)


class SimplifiedAttention(nn.Module):
    """y = x + trunk(x) * sigmoid(mask(x)); trunk and mask are each three
    residual blocks, with a final 1x1 convolution on the mask path."""

    def __init__(self, channels: int):
        super().__init__()
        self.trunk = nn.Sequential(*(ResidualBlock(channels) for _ in range(3)))
        self.mask = nn.Sequential(
            *(ResidualBlock(channels) for _ in range(3)),
            conv2d(channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


class MaskedConv2d(nn.Conv2d):
    """Causal convolution (mask type A): the center tap and all taps later
    in raster order are zeroed, so output[r, c] depends only on inputs
    strictly earlier in raster order."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5):
        super().__init__(
            in_channels, out_channels, kernel_size, padding=kernel_size // 2
        )
        _init_conv(self)
        mask = torch.ones(kernel_size, kernel_size)
        center = kernel_size // 2
        mask[center, center:] = 0
        mask[center + 1 :, :] = 0
        self.register_buffer("mask", mask.view(1, 1, kernel_size, kernel_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.weight * self.mask, self.bias)
