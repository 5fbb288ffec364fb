"""Learned multi-scale feature compression codec and evaluation tools."""

from .codec import CodecConfig, FeatureCodec
from .pyramid import FeaturePyramid, read_fpf, synth_pyramid, write_fpf

__all__ = [
    "CodecConfig",
    "FeatureCodec",
    "FeaturePyramid",
    "read_fpf",
    "synth_pyramid",
    "write_fpf",
]

__version__ = "0.1.0"
