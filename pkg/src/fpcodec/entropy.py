"""Shared entropy model: hyper encoder/decoder, autoregressive context
model, entropy-parameter network, Gaussian conditional for the main
latent, a learned factorized prior for the hyper-latent, quantization
modes, differentiable rate estimation, and quantized CDF tables for the
range coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import norm
from torch import nn

from .blocks import LEAKY_SLOPE, MaskedConv2d, SubpixelConv2d, conv2d
from .errors import ConfigError

SCALE_FLOOR = 0.11
SCALE_MAX = 256.0
SCALE_TABLE_SIZE = 64
P_MIN = 2.0**-16
CDF_TOTAL = 1 << 16
# per-side tail mass excluded from a coding table
TAIL_MASS = 2.0**-17


class HyperEncoder(nn.Module):
    """Five 3x3 convolutions with two stride-2 stages; z dims are
    ceil(y dims / 4)."""

    def __init__(self, n: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                conv2d(n, n, 3),
                conv2d(n, n, 3),
                conv2d(n, n, 3, stride=2),
                conv2d(n, n, 3),
                conv2d(n, n, 3, stride=2),
            ]
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        x = y
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, LEAKY_SLOPE)
        return x


class HyperDecoder(nn.Module):
    """Two subpixel 2x stages widening to 3N/2 and finally 2N channels;
    output is cropped back to the latent's spatial dims."""

    def __init__(self, n: int):
        super().__init__()
        if n % 2 != 0:
            raise ConfigError(f"latent channel count must be even, got {n} (3N/2 layer)")
        self.conv1 = conv2d(n, n, 3)
        self.up1 = SubpixelConv2d(n, n)
        self.conv2 = conv2d(n, 3 * n // 2, 3)
        self.up2 = SubpixelConv2d(3 * n // 2, 3 * n // 2)
        self.conv3 = conv2d(3 * n // 2, 2 * n, 3)

    def forward(self, z_hat: torch.Tensor, y_dims: tuple[int, int]) -> torch.Tensor:
        x = F.leaky_relu(self.conv1(z_hat), LEAKY_SLOPE)
        x = F.leaky_relu(self.up1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv2(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.up2(x), LEAKY_SLOPE)
        x = self.conv3(x)
        return x[..., : y_dims[0], : y_dims[1]]


class ContextModel(nn.Module):
    """Causal 5x5 masked convolution over the quantized latent."""

    def __init__(self, n: int):
        super().__init__()
        self.conv = MaskedConv2d(n, n, 5)

    def forward(self, y_hat: torch.Tensor) -> torch.Tensor:
        return self.conv(y_hat)


def ep_widths(n: int) -> tuple[int, int, int]:
    """1x1 stack widths 10N/3, 8N/3, 2N; non-integral widths are rounded
    to the nearest integer (recorded in checkpoint metadata)."""
    return round(10 * n / 3), round(8 * n / 3), 2 * n


class EntropyParameters(nn.Module):
    """Three 1x1 convolutions mapping hyper (+ context) features to the
    per-element Gaussian mean and scale of the main latent."""

    def __init__(self, n: int, with_cm: bool):
        super().__init__()
        self.n = n
        in_ch = 3 * n if with_cm else 2 * n
        w1, w2, w3 = ep_widths(n)
        self.conv1 = conv2d(in_ch, w1, 1)
        self.conv2 = conv2d(w1, w2, 1)
        self.conv3 = conv2d(w2, w3, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv2(x), LEAKY_SLOPE)
        x = self.conv3(x)
        mu = x[..., : self.n, :, :]
        sigma = torch.clamp(x[..., self.n :, :, :], min=SCALE_FLOOR)
        return mu, sigma


def quantize(
    x: torch.Tensor,
    mode: str,
    mean: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Quantize a latent.

    ``noise`` mode adds Uniform(-0.5, 0.5) (a fixed noise tensor may be
    supplied for reproducible gradient checks); ``round`` mode rounds with
    mean offset so coded symbols are round(x - mean).
    """
    if mode == "noise":
        if noise is None:
            noise = torch.empty_like(x).uniform_(-0.5, 0.5)
        return x + noise
    if mode == "round":
        if mean is None:
            return torch.round(x)
        return torch.round(x - mean) + mean
    raise ValueError(f"unknown quantize mode {mode!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2.0**-0.5))


def gaussian_bin_probability(
    values: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor
) -> torch.Tensor:
    """Probability mass of the unit-width bin around each value under
    N(mu, sigma), floored at 2^-16 for coding stability."""
    centered = torch.abs(values - mu)
    upper = _std_normal_cdf((0.5 - centered) / sigma)
    lower = _std_normal_cdf((-0.5 - centered) / sigma)
    return torch.clamp(upper - lower, min=P_MIN)


class FactorizedPrior(nn.Module):
    """Per-channel monotone cumulative built from 4 stages of width 3.

    Each stage is x -> softplus(H) @ x + b followed (except the last) by
    x -> x + tanh(a) * tanh(x); the final sigmoid yields a nondecreasing
    cumulative with c(-inf)=0 and c(+inf)=1.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 2.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        self._num_stages = len(dims) - 1
        scale = init_scale ** (1.0 / self._num_stages)
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(self._num_stages):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            m = torch.full((channels, dims[k + 1], dims[k]), init)
            self.matrices.append(nn.Parameter(m))
            b = torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5)
            self.biases.append(nn.Parameter(b))
            if k < self._num_stages - 1:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        """x: (channels, 1, L) -> logits of the cumulative, same shape."""
        for k in range(self._num_stages):
            x = torch.matmul(F.softplus(self.matrices[k]), x) + self.biases[k]
            if k < self._num_stages - 1:
                x = x + torch.tanh(self.factors[k]) * torch.tanh(x)
        return x

    def cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise cumulative per channel; x shape (channels, L)."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def bin_probability(self, values: torch.Tensor) -> torch.Tensor:
        """Mass of the unit bin around each value; values shaped
        (batch, channels, H, W). Floored at 2^-16."""
        b, c, h, w = values.shape
        flat = values.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        likelihood = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        likelihood = likelihood.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return torch.clamp(likelihood, min=P_MIN)


def estimate_rate(*likelihoods: torch.Tensor) -> torch.Tensor:
    """Total code length in bits: sum of -log2 p over all elements."""
    total = None
    for p in likelihoods:
        if torch.any(p <= 0):
            raise ValueError("non-positive likelihood")
        bits = torch.sum(-torch.log2(p))
        total = bits if total is None else total + bits
    return total


class EntropyModel(nn.Module):
    """Hyperprior entropy model with optional autoregressive context."""

    def __init__(self, n: int, with_cm: bool = True):
        super().__init__()
        self.n = n
        self.with_cm = with_cm
        self.hyper_encoder = HyperEncoder(n)
        self.hyper_decoder = HyperDecoder(n)
        self.context = ContextModel(n) if with_cm else None
        self.parameters_net = EntropyParameters(n, with_cm)
        self.prior = FactorizedPrior(n)

    def forward(
        self, y: torch.Tensor, mode: str = "noise", noise: tuple[torch.Tensor, torch.Tensor] | None = None
    ) -> dict:
        """Batch path used in training (and round-mode evaluation without
        the context model). Returns y_hat, z_hat, mu, sigma, likelihoods.

        In round mode with the context model this uses the quantized
        latent itself as causal context, matching the sequential coding
        loop in :mod:`fpcodec.codec` only when means are known; exact
        coded behaviour is exercised through the codec paths.
        """
        y_dims = (y.shape[-2], y.shape[-1])
        z = self.hyper_encoder(y)
        z_hat = quantize(z, mode, noise=noise[1] if noise else None)
        psi = self.hyper_decoder(z_hat, y_dims)
        if mode == "noise":
            y_hat = quantize(y, "noise", noise=noise[0] if noise else None)
            mu, sigma = self._params_for(psi, y_hat)
        else:
            if self.with_cm:
                y_hat, mu, sigma = self._round_with_context(y, psi)
            else:
                mu, sigma = self._params_for(psi, None)
                y_hat = quantize(y, "round", mean=mu)
        y_lik = gaussian_bin_probability(y_hat, mu, sigma)
        z_lik = self.prior.bin_probability(z_hat)
        return {
            "y_hat": y_hat,
            "z_hat": z_hat,
            "mu": mu,
            "sigma": sigma,
            "y_likelihood": y_lik,
            "z_likelihood": z_lik,
        }

    def _params_for(self, psi: torch.Tensor, y_hat: torch.Tensor | None):
        if self.with_cm:
            phi = self.context(y_hat)
            return self.parameters_net(torch.cat([psi, phi], dim=-3))
        return self.parameters_net(psi)

    @torch.no_grad()
    def _round_with_context(self, y: torch.Tensor, psi: torch.Tensor):
        """Sequential raster-order rounding with causal context, identical
        to the decoder's reconstruction loop."""
        b, n, h, w = y.shape
        y_hat = torch.zeros_like(y)
        mu_out = torch.zeros_like(y)
        sigma_out = torch.zeros_like(y)
        pad = F.pad(y_hat, (2, 2, 2, 2))
        weight = self.context.conv.weight * self.context.conv.mask
        for r in range(h):
            for c in range(w):
                patch = pad[..., r : r + 5, c : c + 5]
                phi = F.conv2d(patch, weight, self.context.conv.bias)
                vec = torch.cat([psi[..., r : r + 1, c : c + 1], phi], dim=-3)
                mu, sigma = self.parameters_net(vec)
                q = torch.round(y[..., r : r + 1, c : c + 1] - mu) + mu
                y_hat[..., r : r + 1, c : c + 1] = q
                pad[..., r + 2 : r + 3, c + 2 : c + 3] = q
                mu_out[..., r : r + 1, c : c + 1] = mu
                sigma_out[..., r : r + 1, c : c + 1] = sigma
        return y_hat, mu_out, sigma_out


# ---------------------------------------------------------------------------
# CDF tables for the range coder
# ---------------------------------------------------------------------------


@dataclass
class CdfTable:
    """Integer CDF over symbols offset..offset+n-1; ``cdf`` has n+1
    strictly increasing entries from 0 to 65536."""

    offset: int
    cdf: np.ndarray  # int64, cdf[0] == 0, cdf[-1] == CDF_TOTAL

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    def clamp_symbol(self, s: int) -> int:
        return min(max(s, self.offset), self.offset + self.num_symbols - 1)


@dataclass
class CdfTables:
    """Coding tables: one Gaussian table per scale-table entry plus one
    factorized table per hyper-latent channel."""

    scale_table: np.ndarray
    gaussian: list[CdfTable]
    factorized: list[CdfTable]

    def scale_index(self, sigma: np.ndarray) -> np.ndarray:
        """Index of the nearest tabulated scale >= sigma (clipped to the
        largest entry)."""
        idx = np.searchsorted(self.scale_table, sigma - 1e-9)
        return np.clip(idx, 0, len(self.scale_table) - 1)


def make_scale_table() -> np.ndarray:
    return np.exp(
        np.linspace(math.log(SCALE_FLOOR), math.log(SCALE_MAX), SCALE_TABLE_SIZE)
    )


def quantize_pmf(pmf: np.ndarray, total: int = CDF_TOTAL) -> np.ndarray:
    """Deterministically quantize a pmf to integer frequencies summing to
    ``total`` with every bin >= 1; returns the cumulative (n+1 entries)."""
    pmf = np.maximum(np.asarray(pmf, dtype=np.float64), 0.0)
    freq = np.floor(pmf * total + 0.5).astype(np.int64)
    freq = np.maximum(freq, 1)
    diff = total - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    elif diff < 0:
        need = -diff
        for i in np.argsort(-freq, kind="stable"):
            take = min(need, int(freq[i]) - 1)
            freq[i] -= take
            need -= take
            if need == 0:
                break
        if need:
            raise ValueError("pmf has too many bins for the frequency budget")
    cdf = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def _gaussian_table(sigma: float) -> CdfTable:
    tail = max(1, int(math.ceil(sigma * float(norm.isf(TAIL_MASS)))))
    symbols = np.arange(-tail, tail + 1)
    upper = norm.cdf((symbols + 0.5) / sigma)
    lower = norm.cdf((symbols - 0.5) / sigma)
    pmf = upper - lower
    # edge bins absorb the tails so clamped symbols stay codable
    pmf[0] = upper[0]
    pmf[-1] = 1.0 - lower[-1]
    return CdfTable(offset=-tail, cdf=quantize_pmf(pmf))


def _factorized_table(prior: FactorizedPrior, channel: int) -> CdfTable:
    lo, hi = -16, 16
    device = next(prior.parameters()).device
    dtype = next(prior.parameters()).dtype

    def cum(points: np.ndarray) -> np.ndarray:
        x = torch.zeros(prior.channels, len(points), dtype=dtype, device=device)
        x[channel] = torch.as_tensor(points, dtype=dtype, device=device)
        with torch.no_grad():
            return prior.cumulative(x)[channel].cpu().double().numpy()

    # widen the support until both tails fall below the coding tail mass
    for _ in range(20):
        edges = cum(np.array([lo - 0.5, hi + 0.5], dtype=np.float64))
        grow = False
        if edges[0] > TAIL_MASS:
            lo *= 2
            grow = True
        if 1.0 - edges[1] > TAIL_MASS:
            hi *= 2
            grow = True
        if not grow:
            break
    symbols = np.arange(lo, hi + 1)
    c = cum(np.concatenate([symbols - 0.5, [symbols[-1] + 0.5]]).astype(np.float64))
    pmf = np.diff(c)
    pmf[0] = c[1]  # absorb lower tail
    pmf[-1] = 1.0 - c[-2]  # absorb upper tail
    return CdfTable(offset=lo, cdf=quantize_pmf(pmf))


def build_cdf_tables(model: EntropyModel) -> CdfTables:
    """Deterministic coding tables for a trained entropy model."""
    scale_table = make_scale_table()
    gaussian = [_gaussian_table(float(s)) for s in scale_table]
    factorized = [_factorized_table(model.prior, ch) for ch in range(model.n)]
    return CdfTables(scale_table=scale_table, gaussian=gaussian, factorized=factorized)
