"""Feature-pyramid data model, geometry rules, file I/O, synthetic
generation, and the tiled 10-bit quantization baseline.

A pyramid holds layers p2..p5 as (channels, height, width) float32 arrays;
p6 is never stored and is always re-derived from p5 by stride-2
subsampling. Layer i has stride 2**i relative to the source image.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    FpfBadMagic,
    FpfDimMismatch,
    FpfTruncated,
    GeometryError,
)

FPF_MAGIC = b"FPF1"
FPF_VERSION = 1
STORED_LEVELS = (2, 3, 4, 5)
MIN_IMAGE_DIM = 64

# p2 is padded to a multiple of this so that four stride-2 encoder stages
# divide evenly (image stride 64 at the latent).
P2_PAD_MULTIPLE = 16


@dataclass
class FeaturePyramid:
    """Multi-scale feature set {p2..p5} with image provenance.

    ``layers`` maps level -> (C, H, W) float32 array. ``original_dims``
    records pre-padding (H, W) per level so reconstructions can be cropped.
    """

    layers: dict[int, np.ndarray]
    channels: int
    image_width: int
    image_height: int
    padded: bool = False
    original_dims: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for level, plane in self.layers.items():
            validate_plane(plane)
            if plane.shape[0] != self.channels:
                raise GeometryError(
                    f"layer {level} has {plane.shape[0]} channels, "
                    f"expected {self.channels}"
                )

    def layer(self, level: int) -> np.ndarray:
        if level == 6:
            return subsample_p6(self.layers[5])
        return self.layers[level]

    def dims(self, level: int) -> tuple[int, int]:
        if level == 6:
            h, w = self.dims(5)
            return (h + 1) // 2, (w + 1) // 2
        plane = self.layers[level]
        return plane.shape[1], plane.shape[2]


def validate_plane(plane: np.ndarray) -> None:
    if plane.ndim != 3:
        raise GeometryError(f"plane must be (C, H, W), got shape {plane.shape}")
    if not np.all(np.isfinite(plane)):
        raise GeometryError("plane contains NaN or Inf")


def layer_dims(image_width: int, image_height: int, level: int) -> tuple[int, int]:
    """Return (height, width) of pyramid layer ``level`` for an image.

    Layer i has stride 2**i, so each axis is ceil(dim / 2**i).
    """
    if level not in range(2, 7):
        raise GeometryError(f"level must be in 2..6, got {level}")
    if image_width < MIN_IMAGE_DIM or image_height < MIN_IMAGE_DIM:
        raise GeometryError(
            f"image dims must be >= {MIN_IMAGE_DIM}, got "
            f"{image_width}x{image_height}"
        )
    s = 1 << level
    return math.ceil(image_height / s), math.ceil(image_width / s)


def _pad_to(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Replicate-pad bottom/right to the target spatial size."""
    _, h, w = plane.shape
    if h == height and w == width:
        return plane
    if h > height or w > width:
        raise GeometryError(f"cannot pad {h}x{w} down to {height}x{width}")
    return np.pad(plane, ((0, 0), (0, height - h), (0, width - w)), mode="edge")


def pad_pyramid(pyr: FeaturePyramid) -> FeaturePyramid:
    """Pad p2 to a multiple of 16 and each higher layer to exactly half
    of the layer below, recording original dims for later cropping."""
    original = {lv: pyr.dims(lv) for lv in STORED_LEVELS}
    h2, w2 = original[2]
    th = math.ceil(h2 / P2_PAD_MULTIPLE) * P2_PAD_MULTIPLE
    tw = math.ceil(w2 / P2_PAD_MULTIPLE) * P2_PAD_MULTIPLE
    layers = {2: _pad_to(pyr.layers[2], th, tw)}
    for lv in (3, 4, 5):
        th, tw = math.ceil(th / 2), math.ceil(tw / 2)
        layers[lv] = _pad_to(pyr.layers[lv], th, tw)
    return FeaturePyramid(
        layers=layers,
        channels=pyr.channels,
        image_width=pyr.image_width,
        image_height=pyr.image_height,
        padded=True,
        original_dims=original,
    )


def crop_pyramid(pyr: FeaturePyramid, original_dims: dict[int, tuple[int, int]]) -> FeaturePyramid:
    """Inverse of :func:`pad_pyramid`: crop each layer back to its
    recorded pre-padding size."""
    layers = {}
    for lv in STORED_LEVELS:
        h, w = original_dims[lv]
        layers[lv] = np.ascontiguousarray(pyr.layers[lv][:, :h, :w])
    return FeaturePyramid(
        layers=layers,
        channels=pyr.channels,
        image_width=pyr.image_width,
        image_height=pyr.image_height,
        padded=False,
    )


def subsample_p6(p5: np.ndarray) -> np.ndarray:
    """Derive p6 from p5 by stride-2 subsampling (1x1 window)."""
    validate_plane(p5)
    return np.ascontiguousarray(p5[:, ::2, ::2])


# ---------------------------------------------------------------------------
# FPF file format
# ---------------------------------------------------------------------------
# magic "FPF1", version u8, layer_count u8, channels u16 LE,
# image_width u32 LE, image_height u32 LE; then per layer:
# level u8, height u32 LE, width u32 LE, payload = C*H*W float32 LE
# in (channel, row, col) order.

_HEADER = struct.Struct("<4sBBHII")
_LAYER_HEADER = struct.Struct("<BII")


def write_fpf(pyr: FeaturePyramid, path) -> None:
    levels = sorted(pyr.layers.keys())
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                FPF_MAGIC,
                FPF_VERSION,
                len(levels),
                pyr.channels,
                pyr.image_width,
                pyr.image_height,
            )
        )
        for lv in levels:
            plane = pyr.layers[lv]
            _, h, w = plane.shape
            f.write(_LAYER_HEADER.pack(lv, h, w))
            f.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_fpf(path) -> FeaturePyramid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FpfTruncated(f"file is {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, layer_count, channels, iw, ih = _HEADER.unpack_from(data, 0)
    if magic != FPF_MAGIC:
        raise FpfBadMagic(f"bad magic {magic!r}")
    if version != FPF_VERSION:
        raise FpfBadMagic(f"unsupported version {version}")
    off = _HEADER.size
    layers: dict[int, np.ndarray] = {}
    for _ in range(layer_count):
        if off + _LAYER_HEADER.size > len(data):
            raise FpfTruncated("truncated layer header")
        level, h, w = _LAYER_HEADER.unpack_from(data, off)
        off += _LAYER_HEADER.size
        n = channels * h * w * 4
        if off + n > len(data):
            raise FpfTruncated(f"layer {level} payload truncated")
        plane = np.frombuffer(data[off : off + n], dtype="<f4").reshape(channels, h, w)
        layers[level] = plane.copy()
        off += n
    if off != len(data):
        raise FpfDimMismatch(f"{len(data) - off} trailing bytes after last layer")
    for level in layers:
        if level not in range(2, 7):
            raise FpfDimMismatch(f"invalid layer level {level}")
    return FeaturePyramid(
        layers=layers, channels=channels, image_width=iw, image_height=ih
    )


# ---------------------------------------------------------------------------
# Synthetic pyramids
# ---------------------------------------------------------------------------


def synth_pyramid(seed: int, image_dims: tuple[int, int], channels: int = 256) -> FeaturePyramid:
    """Deterministic synthetic pyramid with cross-layer redundancy.

    p2 is a smoothed pseudo-random field; each higher layer is a blurred
    2x decimation of the layer below plus a small independent detail
    component, so neighbouring layers stay strongly correlated.
    """
    image_width, image_height = image_dims
    rng = np.random.default_rng(seed)
    h2, w2 = layer_dims(image_width, image_height, 2)
    p2 = rng.standard_normal((channels, h2, w2)).astype(np.float64)
    p2 = gaussian_filter(p2, sigma=(0, 1.5, 1.5), mode="nearest")
    p2 /= max(p2.std(), 1e-12)
    layers = {2: p2.astype(np.float32)}
    prev = p2
    for lv in (3, 4, 5):
        blurred = gaussian_filter(prev, sigma=(0, 1.0, 1.0), mode="nearest")
        deci = blurred[:, ::2, ::2]
        noise = 0.1 * rng.standard_normal(deci.shape)
        noise = gaussian_filter(noise, sigma=(0, 1.0, 1.0), mode="nearest")
        prev = deci + noise
        layers[lv] = prev.astype(np.float32)
    return FeaturePyramid(
        layers=layers,
        channels=channels,
        image_width=image_width,
        image_height=image_height,
    )


# ---------------------------------------------------------------------------
# Feature-anchor tiling + 10-bit uniform quantization baseline
# ---------------------------------------------------------------------------


@dataclass
class PackedFrame:
    """All channels of a pyramid tiled into one 10-bit single-channel grid.

    ``layout`` maps level -> (row_offset, tile_rows, tile_cols, h, w);
    min/max side info is global over the whole pyramid.
    """

    grid: np.ndarray  # (H, W) uint16, values 0..1023
    layout: dict[int, tuple[int, int, int, int, int]]
    vmin: float
    vmax: float
    channels: int
    image_width: int
    image_height: int
    constant_input: bool = False


def _tile_grid_shape(channels: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(channels))
    rows = math.ceil(channels / cols)
    return rows, cols


def pack_and_quantize_10bit(pyr: FeaturePyramid) -> PackedFrame:
    """Quantize a pyramid to 10 bits with one global min/max and tile
    each level's channels row-major into a near-square grid."""
    levels = sorted(pyr.layers.keys())
    vmin = float(min(pyr.layers[lv].min() for lv in levels))
    vmax = float(max(pyr.layers[lv].max() for lv in levels))
    constant = vmax == vmin
    scale = 0.0 if constant else 1023.0 / (vmax - vmin)

    sections = []
    layout = {}
    row_offset = 0
    width = 0
    for lv in levels:
        plane = pyr.layers[lv].astype(np.float64)
        c, h, w = plane.shape
        rows, cols = _tile_grid_shape(c)
        q = np.zeros((c, h, w), dtype=np.uint16)
        if not constant:
            # round-half-up ties
            q = np.clip(np.floor((plane - vmin) * scale + 0.5), 0, 1023).astype(np.uint16)
        section = np.zeros((rows * h, cols * w), dtype=np.uint16)
        for ch in range(c):
            r, col = divmod(ch, cols)
            section[r * h : (r + 1) * h, col * w : (col + 1) * w] = q[ch]
        layout[lv] = (row_offset, rows, cols, h, w)
        sections.append(section)
        row_offset += section.shape[0]
        width = max(width, section.shape[1])

    grid = np.zeros((row_offset, width), dtype=np.uint16)
    r = 0
    for section in sections:
        grid[r : r + section.shape[0], : section.shape[1]] = section
        r += section.shape[0]
    return PackedFrame(
        grid=grid,
        layout=layout,
        vmin=vmin,
        vmax=vmax,
        channels=pyr.channels,
        image_width=pyr.image_width,
        image_height=pyr.image_height,
        constant_input=constant,
    )


def unpack_dequantize(frame: PackedFrame) -> FeaturePyramid:
    """Invert :func:`pack_and_quantize_10bit` up to quantization error."""
    layers = {}
    span = frame.vmax - frame.vmin
    for lv, (row_offset, rows, cols, h, w) in sorted(frame.layout.items()):
        plane = np.empty((frame.channels, h, w), dtype=np.float32)
        for ch in range(frame.channels):
            r, col = divmod(ch, cols)
            tile = frame.grid[
                row_offset + r * h : row_offset + (r + 1) * h,
                col * w : (col + 1) * w,
            ]
            if frame.constant_input:
                plane[ch] = frame.vmin
            else:
                plane[ch] = (tile.astype(np.float64) / 1023.0 * span + frame.vmin).astype(
                    np.float32
                )
        layers[lv] = plane
    return FeaturePyramid(
        layers=layers,
        channels=frame.channels,
        image_width=frame.image_width,
        image_height=frame.image_height,
    )
