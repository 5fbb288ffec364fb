"""Entropy-coder backends.

The native range coder (built separately, in ``rangecoder/`` at the repo
root) is loaded through ctypes when available; otherwise the pure-Python
reference coder is used. Both code the same (symbols, table indexes, CDF
tables) contract; payload bytes differ between backends, so encode and
decode must use the same backend.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from . import refcoder
from .entropy import CdfTable
from .errors import CoderError


class PythonBackend:
    """Exact-integer reference coder (slow, always available)."""

    name = "python-reference"

    def encode(self, symbols, indexes, tables: list[CdfTable]) -> bytes:
        return refcoder.rc_encode(
            [int(s) for s in symbols], [int(i) for i in indexes], tables
        )

    def decode(self, data: bytes, indexes, count: int, tables: list[CdfTable]) -> np.ndarray:
        out = refcoder.rc_decode(data, tables, [int(i) for i in indexes], count)
        return np.asarray(out, dtype=np.int32)

    def stream_decoder(self, data: bytes, tables: list[CdfTable]):
        return refcoder.StreamDecoder(data, tables)


def _flatten_tables(tables: list[CdfTable]):
    offsets = np.asarray([t.offset for t in tables], dtype=np.int32)
    lengths = np.asarray([len(t.cdf) for t in tables], dtype=np.uint32)
    values = np.concatenate([t.cdf for t in tables]).astype(np.uint32)
    return offsets, lengths, values


class _NativeStreamDecoder:
    def __init__(self, lib, data: bytes, tables: list[CdfTable]):
        self._lib = lib
        self._buf = ctypes.create_string_buffer(data, len(data))
        self._offsets, self._lengths, self._values = _flatten_tables(tables)
        self._handle = lib.rc_stream_new(
            ctypes.cast(self._buf, ctypes.POINTER(ctypes.c_uint8)),
            len(data),
            self._offsets.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            self._lengths.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            len(tables),
            self._values.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
        )
        if not self._handle:
            raise CoderError("native stream decoder rejected the tables")

    def next_symbol(self, table_index: int) -> int:
        out = ctypes.c_int32()
        rc = self._lib.rc_stream_next(self._handle, table_index, ctypes.byref(out))
        if rc != 0:
            raise CoderError(f"native stream decode failed (code {rc})")
        return out.value

    def close(self):
        if self._handle:
            self._lib.rc_stream_free(self._handle)
            self._handle = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


class NativeBackend:
    """ctypes bridge to the Rust range coder cdylib."""

    name = "native-range-coder"

    def __init__(self, lib_path: str):
        lib = ctypes.CDLL(lib_path)
        lib.rc_encode.restype = ctypes.c_int32
        lib.rc_decode.restype = ctypes.c_int32
        lib.rc_stream_new.restype = ctypes.c_void_p
        lib.rc_stream_next.restype = ctypes.c_int32
        lib.rc_stream_next.argtypes = [
            ctypes.c_void_p,
            ctypes.c_uint32,
            ctypes.POINTER(ctypes.c_int32),
        ]
        lib.rc_stream_free.argtypes = [ctypes.c_void_p]
        lib.rc_free.restype = None
        self._lib = lib

    def encode(self, symbols, indexes, tables: list[CdfTable]) -> bytes:
        refcoder.validate_tables(tables)
        symbols = np.ascontiguousarray(symbols, dtype=np.int32)
        indexes = np.ascontiguousarray(indexes, dtype=np.uint32)
        offsets, lengths, values = _flatten_tables(tables)
        out_ptr = ctypes.POINTER(ctypes.c_uint8)()
        out_len = ctypes.c_size_t()
        rc = self._lib.rc_encode(
            symbols.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            indexes.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.c_size_t(len(symbols)),
            offsets.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            lengths.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.c_size_t(len(tables)),
            values.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.byref(out_ptr),
            ctypes.byref(out_len),
        )
        if rc != 0:
            raise CoderError(f"native encode failed (code {rc})")
        try:
            return ctypes.string_at(out_ptr, out_len.value)
        finally:
            self._lib.rc_free(out_ptr, out_len)

    def decode(self, data: bytes, indexes, count: int, tables: list[CdfTable]) -> np.ndarray:
        refcoder.validate_tables(tables)
        indexes = np.ascontiguousarray(indexes, dtype=np.uint32)
        offsets, lengths, values = _flatten_tables(tables)
        out = np.empty(count, dtype=np.int32)
        buf = ctypes.create_string_buffer(data, len(data))
        rc = self._lib.rc_decode(
            ctypes.cast(buf, ctypes.POINTER(ctypes.c_uint8)),
            ctypes.c_size_t(len(data)),
            indexes.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.c_size_t(count),
            offsets.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            lengths.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            ctypes.c_size_t(len(tables)),
            values.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
        )
        if rc != 0:
            raise CoderError(f"native decode failed (code {rc})")
        return out

    def stream_decoder(self, data: bytes, tables: list[CdfTable]):
        return _NativeStreamDecoder(self._lib, data, tables)


def _native_lib_path() -> str | None:
    env = os.environ.get("FPCODEC_RANGECODER_LIB")
    if env:
        return env if Path(env).exists() else None
    root = Path(__file__).resolve().parents[2]
    for sub in ("release", "debug"):
        cand = root / "rangecoder" / "target" / sub / "librangecoder.so"
        if cand.exists():
            return str(cand)
    return None


_default_backend = None


def default_backend(prefer_native: bool = True):
    """Native backend when its library has been built, else the Python
    reference coder."""
    global _default_backend
    if _default_backend is None:
        path = _native_lib_path() if prefer_native else None
        _default_backend = NativeBackend(path) if path else PythonBackend()
    return _default_backend


def native_available() -> bool:
    return _native_lib_path() is not None
