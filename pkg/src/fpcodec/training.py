"""Rate-distortion training: loss assembly, plateau-halving learning
rate, the two-stage schedule (fixed-size crops, then original-size
fine-tuning), and checkpoint emission.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import CodecConfig, FeatureCodec
from .errors import ConfigError, GeometryError
from .pyramid import FeaturePyramid

PAPER_LAMBDAS = (0.0125, 0.025, 0.125, 0.25, 0.375, 0.5)
DEFAULT_WEIGHTS = {lv: 0.2 for lv in (2, 3, 4, 5, 6)}

LR_INITIAL = 1e-4
LR_MIN_HALVE = 5e-6
PLATEAU_PATIENCE = 10
PLATEAU_REL_IMPROVEMENT = 1e-4


def n_latent_for(lam: float, with_cm: bool) -> int:
    """Channel-width rule: narrow latents only for the three lowest
    quality levels of the context-model variant."""
    if not with_cm:
        return 192
    return 128 if lam <= 0.125 else 192


@dataclass
class TrainConfig:
    lam: float = 0.0125
    weights: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    n_latent: int | None = None  # default: n_latent_for(lam, with_cm)
    channels: int = 256
    with_cm: bool = True
    pathway: str = "bottom_up"
    batch_size: int = 4
    steps: int = 2000
    crop_image: int = 512  # image-space crop, must be a multiple of 64
    lr: float = LR_INITIAL
    finetune_steps: int = 0
    finetune_lr: float = 1e-5
    val_fraction: float = 0.02
    val_interval: int = 100
    seed: int = 0
    quality_index: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ConfigError("distortion weights must sum to 1")
        if self.crop_image % 64 != 0:
            raise ConfigError("crop size must be a multiple of 64 image pixels")
        if self.n_latent is None:
            self.n_latent = n_latent_for(self.lam, self.with_cm)


@dataclass
class RDLossReport:
    rate_bpp: float
    distortion_total: float
    per_layer: dict[int, float]
    loss: float


def distortion_total(
    target: dict[int, torch.Tensor],
    recon: dict[int, torch.Tensor],
    weights: dict[int, float],
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Weighted per-layer MSE over layers 2..6 (layer 6 derived from 5)."""
    per_layer = {}
    total = None
    for lv, w in sorted(weights.items()):
        t = target[lv] if lv in target else target[5][..., ::2, ::2]
        r = recon[lv] if lv in recon else recon[5][..., ::2, ::2]
        if t.shape != r.shape:
            raise GeometryError(
                f"layer {lv} shape mismatch: {tuple(t.shape)} vs {tuple(r.shape)}"
            )
        d = torch.mean((t - r) ** 2)
        per_layer[lv] = d
        total = w * d if total is None else total + w * d
    return total, per_layer


def rd_loss(rate_bpp, distortion, lam: float):
    """L = R + lambda * D, with R in bits per input-image pixel."""
    return rate_bpp + lam * distortion


class PlateauLR:
    """Halve the learning rate whenever the validation loss plateaus:
    no relative improvement beyond 1e-4 over 10 consecutive evaluations.
    Halving stops once another halving would fall below 5e-6."""

    def __init__(self, initial: float = LR_INITIAL):
        self.lr = initial
        self.best = math.inf
        self.stale = 0

    def update(self, validation_loss: float) -> float:
        if validation_loss < self.best * (1.0 - PLATEAU_REL_IMPROVEMENT):
            self.best = validation_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= PLATEAU_PATIENCE:
                if self.lr / 2 >= LR_MIN_HALVE:
                    self.lr /= 2
                self.stale = 0
                self.best = validation_loss
        return self.lr


def random_crop(pyr: FeaturePyramid, crop_image: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Crop all levels coherently; offsets are multiples of 32 image
    pixels so every level's offset is integral."""
    max_y = max(pyr.image_height - crop_image, 0) // 32
    max_x = max(pyr.image_width - crop_image, 0) // 32
    oy = 32 * int(rng.integers(0, max_y + 1))
    ox = 32 * int(rng.integers(0, max_x + 1))
    out = {}
    for lv in (2, 3, 4, 5):
        s = 1 << lv
        size = crop_image // s
        o_r, o_c = oy // s, ox // s
        plane = pyr.layers[lv]
        if o_r + size > plane.shape[1] or o_c + size > plane.shape[2]:
            raise GeometryError(f"crop exceeds layer {lv} of {plane.shape}")
        out[lv] = plane[:, o_r : o_r + size, o_c : o_c + size]
    return out


def _batch_tensors(crops: list[dict[int, np.ndarray]], dtype) -> dict[int, torch.Tensor]:
    return {
        lv: torch.stack(
            [torch.from_numpy(np.ascontiguousarray(c[lv])).to(dtype) for c in crops]
        )
        for lv in (2, 3, 4, 5)
    }


def loss_report(
    codec: FeatureCodec,
    layers: dict[int, torch.Tensor],
    lam: float,
    weights: dict[int, float],
    image_pixels: int,
    mode: str = "noise",
    noise=None,
) -> tuple[torch.Tensor, RDLossReport]:
    """One forward pass and the decomposed rate-distortion loss."""
    out = codec(layers, mode=mode, noise=noise)
    rate_bpp = out["bits"] / image_pixels
    d_total, per_layer = distortion_total(layers, out["recon"], weights)
    loss = rd_loss(rate_bpp, d_total, lam)
    report = RDLossReport(
        rate_bpp=float(rate_bpp.detach()),
        distortion_total=float(d_total.detach()),
        per_layer={lv: float(d.detach()) for lv, d in per_layer.items()},
        loss=float(loss.detach()),
    )
    return loss, report


def _check_finite(report: RDLossReport, step: int) -> None:
    terms = {"R": report.rate_bpp, "D_total": report.distortion_total, "L": report.loss}
    terms.update({f"D_{lv}": d for lv, d in report.per_layer.items()})
    bad = [name for name, v in terms.items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(
            f"non-finite loss terms at step {step}: {', '.join(bad)}"
        )


def train(
    config: TrainConfig,
    corpus: list[FeaturePyramid],
    log_path=None,
    progress=None,
) -> tuple[FeatureCodec, list[dict]]:
    """Two-stage rate-distortion training on a pyramid corpus.

    Stage 1 trains on coherent fixed-size crops with plateau-halving
    learning rate; stage 2 (if ``finetune_steps`` > 0) fine-tunes at
    original sizes with batch 1. Returns the trained codec and the
    per-step loss log.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    codec = FeatureCodec(
        CodecConfig(
            n_latent=config.n_latent,
            channels=config.channels,
            with_cm=config.with_cm,
            pathway=config.pathway,
            lam=config.lam,
            quality_index=config.quality_index,
        )
    )
    dtype = next(codec.parameters()).dtype

    n_val = max(1, int(round(config.val_fraction * len(corpus)))) if len(corpus) > 1 else 0
    order = rng.permutation(len(corpus))
    val_set = [corpus[i] for i in order[:n_val]]
    train_set = [corpus[i] for i in order[n_val:]] or list(corpus)

    optimizer = torch.optim.Adam(codec.parameters(), lr=config.lr)
    schedule = PlateauLR(config.lr)
    log: list[dict] = []
    log_file = open(log_path, "w") if log_path else None

    def run_step(step: int, layers: dict[int, torch.Tensor], pixels: int, lr: float, stage: int):
        optimizer.zero_grad()
        loss, report = loss_report(
            codec, layers, config.lam, config.weights, pixels
        )
        _check_finite(report, step)
        loss.backward()
        optimizer.step()
        record = {
            "step": step,
            "stage": stage,
            "R": report.rate_bpp,
            "D_total": report.distortion_total,
            **{f"D_{lv}": d for lv, d in report.per_layer.items()},
            "L": report.loss,
            "lr": lr,
        }
        log.append(record)
        if log_file:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
        if progress:
            progress(record)

    def validation_loss() -> float:
        with torch.no_grad(), torch.random.fork_rng():
            torch.manual_seed(config.seed + 1)
            losses = []
            for pyr in val_set:
                crop = random_crop(pyr, config.crop_image, np.random.default_rng(config.seed))
                layers = _batch_tensors([crop], dtype)
                loss, _ = loss_report(
                    codec, layers, config.lam, config.weights, config.crop_image**2
                )
                losses.append(float(loss))
        return float(np.mean(losses))

    try:
        for step in range(config.steps):
            picks = rng.integers(0, len(train_set), config.batch_size)
            crops = [random_crop(train_set[i], config.crop_image, rng) for i in picks]
            layers = _batch_tensors(crops, dtype)
            pixels = config.batch_size * config.crop_image**2
            run_step(step, layers, pixels, schedule.lr, stage=1)
            if val_set and (step + 1) % config.val_interval == 0:
                lr = schedule.update(validation_loss())
                for group in optimizer.param_groups:
                    group["lr"] = lr

        for group in optimizer.param_groups:
            group["lr"] = config.finetune_lr
        for step in range(config.finetune_steps):
            pyr = train_set[int(rng.integers(0, len(train_set)))]
            from .pyramid import pad_pyramid

            padded = pad_pyramid(pyr)
            layers = {
                lv: torch.from_numpy(np.ascontiguousarray(padded.layers[lv]))
                .to(dtype)
                .unsqueeze(0)
                for lv in (2, 3, 4, 5)
            }
            pixels = pyr.image_width * pyr.image_height
            run_step(config.steps + step, layers, pixels, config.finetune_lr, stage=2)
    finally:
        if log_file:
            log_file.close()
    return codec, log
