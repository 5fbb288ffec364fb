"""Byte-exact container for one compressed pyramid: header + hyper-latent
payload + main-latent payload.

Header layout (all little-endian):

    magic "LMFC" (4) | version u8 | flags u8 | N u16 | quality_index u8 |
    channels u16 | image_width u32 | image_height u32 | y_height u16 |
    y_width u16 | z_height u16 | z_width u16 | z_len u32 | y_len u32 |
    header_crc32 u32

flags bit0: context model present; bit1: top-down mixing pathway.
The CRC covers all preceding header bytes. See docs/bitstream.md for a
worked hex example.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import (
    StreamBadMagic,
    StreamBadVersion,
    StreamCrcMismatch,
    StreamTruncated,
)

MAGIC = b"LMFC"
VERSION = 1
FLAG_CONTEXT_MODEL = 1
FLAG_TOP_DOWN = 2

_FMT = struct.Struct("<4sBBHBHIIHHHHII")
HEADER_SIZE = _FMT.size + 4  # + crc32


@dataclass
class StreamHeader:
    flags: int
    n_latent: int
    quality_index: int
    channels: int
    image_width: int
    image_height: int
    y_height: int
    y_width: int
    z_height: int
    z_width: int
    z_len: int
    y_len: int
    version: int = VERSION

    @property
    def with_cm(self) -> bool:
        return bool(self.flags & FLAG_CONTEXT_MODEL)

    @property
    def top_down(self) -> bool:
        return bool(self.flags & FLAG_TOP_DOWN)

    def pack(self) -> bytes:
        body = _FMT.pack(
            MAGIC,
            self.version,
            self.flags,
            self.n_latent,
            self.quality_index,
            self.channels,
            self.image_width,
            self.image_height,
            self.y_height,
            self.y_width,
            self.z_height,
            self.z_width,
            self.z_len,
            self.y_len,
        )
        return body + struct.pack("<I", zlib.crc32(body))


def serialize(header: StreamHeader, z_bytes: bytes, y_bytes: bytes) -> bytes:
    if header.z_len != len(z_bytes) or header.y_len != len(y_bytes):
        raise ValueError("header payload lengths do not match payloads")
    return header.pack() + z_bytes + y_bytes


def parse(data: bytes) -> tuple[StreamHeader, bytes, bytes]:
    if len(data) < HEADER_SIZE:
        raise StreamTruncated(f"{len(data)} bytes, header needs {HEADER_SIZE}")
    body = data[: _FMT.size]
    (crc,) = struct.unpack_from("<I", data, _FMT.size)
    if zlib.crc32(body) != crc:
        raise StreamCrcMismatch("header CRC mismatch")
    (
        magic,
        version,
        flags,
        n_latent,
        quality_index,
        channels,
        image_width,
        image_height,
        y_height,
        y_width,
        z_height,
        z_width,
        z_len,
        y_len,
    ) = _FMT.unpack(body)
    if magic != MAGIC:
        raise StreamBadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamBadVersion(f"unsupported version {version}")
    if len(data) != HEADER_SIZE + z_len + y_len:
        raise StreamTruncated(
            f"expected {HEADER_SIZE + z_len + y_len} bytes, got {len(data)}"
        )
    header = StreamHeader(
        flags=flags,
        n_latent=n_latent,
        quality_index=quality_index,
        channels=channels,
        image_width=image_width,
        image_height=image_height,
        y_height=y_height,
        y_width=y_width,
        z_height=z_height,
        z_width=z_width,
        z_len=z_len,
        y_len=y_len,
        version=version,
    )
    z_bytes = data[HEADER_SIZE : HEADER_SIZE + z_len]
    y_bytes = data[HEADER_SIZE + z_len :]
    return header, z_bytes, y_bytes


def bpp_of(data: bytes, image_width: int, image_height: int) -> float:
    """Bits per input-image pixel, counting header and both payloads."""
    if image_width <= 0 or image_height <= 0:
        raise ValueError("image dims must be positive")
    return 8.0 * len(data) / (image_width * image_height)
