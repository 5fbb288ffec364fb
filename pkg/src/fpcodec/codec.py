"""End-to-end codec: pyramid -> latent -> entropy-coded container and
back. Ties together the fusion encoder, the reconstruction decoder, the
entropy model, the CDF tables, and an entropy-coder backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import bitstream
from .bitstream import FLAG_CONTEXT_MODEL, FLAG_TOP_DOWN, StreamHeader
from .drnet import BOTTOM_UP, DRNet, DRNetConfig, crop_layers
from .entropy import (
    CdfTables,
    EntropyModel,
    estimate_rate,
    gaussian_bin_probability,
    quantize,
)
from .errors import ConfigError
from .fenet import FENet, FENetConfig
from .pyramid import FeaturePyramid, layer_dims, pad_pyramid


@dataclass
class CodecConfig:
    n_latent: int = 128
    channels: int = 256
    with_cm: bool = True
    pathway: str = BOTTOM_UP
    lam: float = 0.0125
    quality_index: int = 0
    distortion_weights: dict[int, float] = field(
        default_factory=lambda: {lv: 0.2 for lv in (2, 3, 4, 5, 6)}
    )


class FeatureCodec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.fenet = FENet(FENetConfig(config.n_latent, config.channels))
        self.drnet = DRNet(
            DRNetConfig(config.n_latent, config.channels, config.pathway)
        )
        self.entropy = EntropyModel(config.n_latent, config.with_cm)

    # ------------------------------------------------------------------
    # training / evaluation forward
    # ------------------------------------------------------------------

    def forward(
        self,
        layers: dict[int, torch.Tensor],
        mode: str = "noise",
        noise: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> dict:
        """Full differentiable pass on padded layer tensors {2..5}.

        Returns reconstructed layers {2..6} (at padded dims), the total
        rate estimate in bits, and the entropy-model internals.
        """
        y = self.fenet(layers[2], layers[3], layers[4], layers[5])
        em = self.entropy(y, mode=mode, noise=noise)
        recon = self.drnet(em["y_hat"])
        bits = estimate_rate(em["y_likelihood"], em["z_likelihood"])
        return {"y": y, "recon": recon, "bits": bits, **em}

    # ------------------------------------------------------------------
    # coding paths
    # ------------------------------------------------------------------

    def _pyramid_tensors(self, pyr: FeaturePyramid) -> tuple[dict[int, torch.Tensor], FeaturePyramid]:
        if pyr.channels != self.config.channels:
            raise ConfigError(
                f"pyramid has {pyr.channels} channels, codec expects "
                f"{self.config.channels}"
            )
        padded = pyr if pyr.padded else pad_pyramid(pyr)
        dtype = next(self.parameters()).dtype
        tensors = {
            lv: torch.from_numpy(np.ascontiguousarray(padded.layers[lv])).to(dtype).unsqueeze(0)
            for lv in (2, 3, 4, 5)
        }
        return tensors, padded

    @torch.no_grad()
    def _encode_latents(self, pyr: FeaturePyramid, tables: CdfTables):
        """Deterministic encode-side pass: quantized latents plus the
        symbol/index streams the coder would see."""
        tensors, padded = self._pyramid_tensors(pyr)
        y = self.fenet(tensors[2], tensors[3], tensors[4], tensors[5])
        y_dims = (y.shape[-2], y.shape[-1])

        z = self.entropy.hyper_encoder(y)
        z_sym, z_idx, z_hat = _quantize_factorized(z, tables)
        psi = self.entropy.hyper_decoder(z_hat, y_dims)

        if self.config.with_cm:
            y_hat, y_sym, y_idx, mu, sigma = _code_autoregressive(
                self.entropy, psi, tables, y=y
            )
        else:
            mu, sigma = self.entropy.parameters_net(psi)
            y_hat, y_sym, y_idx = _quantize_gaussian(y, mu, sigma, tables)

        bits = estimate_rate(
            gaussian_bin_probability(y_hat, mu, sigma),
            self.entropy.prior.bin_probability(z_hat),
        )
        return {
            "padded": padded,
            "y_dims": y_dims,
            "y_hat": y_hat,
            "z_hat": z_hat,
            "y_symbols": y_sym,
            "y_indexes": y_idx,
            "z_symbols": z_sym,
            "z_indexes": z_idx,
            "estimated_bits": float(bits),
        }

    @torch.no_grad()
    def _reconstruct(self, y_hat: torch.Tensor, image_width: int, image_height: int) -> FeaturePyramid:
        original = {lv: layer_dims(image_width, image_height, lv) for lv in (2, 3, 4, 5)}
        recon = crop_layers(self.drnet(y_hat), original)
        layers = {
            lv: recon[lv].squeeze(0).to(torch.float32).cpu().numpy()
            for lv in (2, 3, 4, 5)
        }
        return FeaturePyramid(
            layers=layers,
            channels=self.config.channels,
            image_width=image_width,
            image_height=image_height,
        )

    @torch.no_grad()
    def inference_round(self, pyr: FeaturePyramid, tables: CdfTables) -> dict:
        """Coding-free forward pass with the exact quantization the coder
        uses (including symbol clamping to table supports)."""
        enc = self._encode_latents(pyr, tables)
        recon = self._reconstruct(enc["y_hat"], pyr.image_width, pyr.image_height)
        return {"recon": recon, **enc}

    @torch.no_grad()
    def compress(self, pyr: FeaturePyramid, tables: CdfTables, backend) -> tuple[bytes, dict]:
        enc = self._encode_latents(pyr, tables)
        z_bytes = backend.encode(enc["z_symbols"], enc["z_indexes"], tables.factorized)
        y_bytes = backend.encode(enc["y_symbols"], enc["y_indexes"], tables.gaussian)
        flags = (FLAG_CONTEXT_MODEL if self.config.with_cm else 0) | (
            FLAG_TOP_DOWN if self.config.pathway != BOTTOM_UP else 0
        )
        zh, zw = enc["z_hat"].shape[-2:]
        header = StreamHeader(
            flags=flags,
            n_latent=self.config.n_latent,
            quality_index=self.config.quality_index,
            channels=self.config.channels,
            image_width=pyr.image_width,
            image_height=pyr.image_height,
            y_height=enc["y_dims"][0],
            y_width=enc["y_dims"][1],
            z_height=zh,
            z_width=zw,
            z_len=len(z_bytes),
            y_len=len(y_bytes),
        )
        data = bitstream.serialize(header, z_bytes, y_bytes)
        info = {
            "estimated_bits": enc["estimated_bits"],
            "actual_bits": 8 * (len(z_bytes) + len(y_bytes)),
            "bpp": bitstream.bpp_of(data, pyr.image_width, pyr.image_height),
            "y_hat": enc["y_hat"],
        }
        return data, info

    @torch.no_grad()
    def decompress(self, data: bytes, tables: CdfTables, backend) -> tuple[FeaturePyramid, dict]:
        header, z_bytes, y_bytes = bitstream.parse(data)
        if header.with_cm != self.config.with_cm:
            raise ConfigError(
                "stream/checkpoint context-model mismatch: stream "
                f"with_cm={header.with_cm}, checkpoint with_cm={self.config.with_cm}"
            )
        if header.n_latent != self.config.n_latent:
            raise ConfigError(
                f"stream N={header.n_latent} does not match checkpoint "
                f"N={self.config.n_latent}"
            )
        if header.channels != self.config.channels:
            raise ConfigError(
                f"stream channels={header.channels} does not match checkpoint "
                f"channels={self.config.channels}"
            )
        n = self.config.n_latent
        dtype = next(self.parameters()).dtype
        y_dims = (header.y_height, header.y_width)

        z_count = n * header.z_height * header.z_width
        z_idx = np.repeat(np.arange(n, dtype=np.uint32), header.z_height * header.z_width)
        z_sym = backend.decode(z_bytes, z_idx, z_count, tables.factorized)
        z_hat = (
            torch.from_numpy(z_sym.astype(np.float32))
            .reshape(1, n, header.z_height, header.z_width)
            .to(dtype)
        )
        psi = self.entropy.hyper_decoder(z_hat, y_dims)

        if self.config.with_cm:
            stream = backend.stream_decoder(y_bytes, tables.gaussian)
            y_hat, _, _, _, _ = _code_autoregressive(
                self.entropy, psi, tables, stream=stream
            )
        else:
            mu, sigma = self.entropy.parameters_net(psi)
            y_idx = tables.scale_index(
                sigma.to(torch.float32).cpu().numpy().ravel()
            ).astype(np.uint32)
            y_sym = backend.decode(y_bytes, y_idx, y_idx.size, tables.gaussian)
            y_hat = (
                torch.from_numpy(y_sym.astype(np.float32)).reshape(mu.shape).to(dtype)
                + mu
            )
        recon = self._reconstruct(y_hat, header.image_width, header.image_height)
        return recon, {"y_hat": y_hat, "header": header}


def _quantize_factorized(z: torch.Tensor, tables: CdfTables):
    """Round the hyper-latent and clamp to per-channel table support;
    symbol order is (channel, row, col)."""
    n = z.shape[1]
    offsets = np.asarray([t.offset for t in tables.factorized], dtype=np.int64)
    tops = offsets + np.asarray(
        [t.num_symbols for t in tables.factorized], dtype=np.int64
    ) - 1
    q = torch.round(z).to(torch.float32).cpu().numpy().astype(np.int64)[0]
    q = np.clip(q, offsets[:, None, None], tops[:, None, None])
    idx = np.repeat(np.arange(n, dtype=np.uint32), q.shape[1] * q.shape[2])
    z_hat = torch.from_numpy(q.astype(np.float32)).unsqueeze(0).to(z.dtype)
    return q.ravel().astype(np.int32), idx, z_hat


def _quantize_gaussian(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, tables: CdfTables):
    """Mean-offset rounding with clamping to the selected scale table's
    support; symbol order is flat (channel, row, col)."""
    offsets = np.asarray([t.offset for t in tables.gaussian], dtype=np.int64)
    nums = np.asarray([t.num_symbols for t in tables.gaussian], dtype=np.int64)
    idx = tables.scale_index(sigma.to(torch.float32).cpu().numpy().ravel())
    q = torch.round(y - mu).to(torch.float32).cpu().numpy().ravel().astype(np.int64)
    lo = offsets[idx]
    q = np.clip(q, lo, lo + nums[idx] - 1)
    y_hat = (
        torch.from_numpy(q.astype(np.float32)).reshape(mu.shape).to(y.dtype) + mu
    )
    return y_hat, q.astype(np.int32), idx.astype(np.uint32)


def _code_autoregressive(
    entropy: EntropyModel,
    psi: torch.Tensor,
    tables: CdfTables,
    y: torch.Tensor | None = None,
    stream=None,
):
    """Shared raster-order coding loop for the context-model path.

    With ``y`` given this is the encode side (produces symbols); with
    ``stream`` given it is the decode side (consumes symbols). Both sides
    compute mu/sigma from identical causal prefixes, so they agree
    bit-exactly on the same platform.
    """
    if (y is None) == (stream is None):
        raise ValueError("exactly one of y / stream must be given")
    n = psi.shape[1] // 2
    h, w = psi.shape[-2:]
    dtype = psi.dtype
    offsets = np.asarray([t.offset for t in tables.gaussian], dtype=np.int64)
    nums = np.asarray([t.num_symbols for t in tables.gaussian], dtype=np.int64)

    y_hat = torch.zeros(1, n, h, w, dtype=dtype)
    mu_out = torch.zeros_like(y_hat)
    sigma_out = torch.zeros_like(y_hat)
    padded = F.pad(y_hat, (2, 2, 2, 2))
    weight = entropy.context.conv.weight * entropy.context.conv.mask
    bias = entropy.context.conv.bias
    symbols: list[int] = []
    indexes: list[int] = []

    for r in range(h):
        for c in range(w):
            patch = padded[..., r : r + 5, c : c + 5]
            phi = F.conv2d(patch, weight, bias)
            vec = torch.cat([psi[..., r : r + 1, c : c + 1], phi], dim=-3)
            mu, sigma = entropy.parameters_net(vec)
            idx = tables.scale_index(
                sigma.to(torch.float32).cpu().numpy().ravel()
            ).astype(np.int64)
            lo = offsets[idx]
            hi = lo + nums[idx] - 1
            if y is not None:
                q = (
                    torch.round(y[..., r : r + 1, c : c + 1] - mu)
                    .to(torch.float32)
                    .cpu()
                    .numpy()
                    .ravel()
                    .astype(np.int64)
                )
                q = np.clip(q, lo, hi)
                symbols.extend(int(v) for v in q)
                indexes.extend(int(v) for v in idx)
            else:
                q = np.asarray(
                    [stream.next_symbol(int(i)) for i in idx], dtype=np.int64
                )
            val = torch.from_numpy(q.astype(np.float32)).reshape(mu.shape).to(dtype) + mu
            y_hat[..., r : r + 1, c : c + 1] = val
            padded[..., r + 2 : r + 3, c + 2 : c + 3] = val
            mu_out[..., r : r + 1, c : c + 1] = mu
            sigma_out[..., r : r + 1, c : c + 1] = sigma

    return (
        y_hat,
        np.asarray(symbols, dtype=np.int32),
        np.asarray(indexes, dtype=np.uint32),
        mu_out,
        sigma_out,
    )
