"""Slow exact-integer arithmetic coder over 16-bit quantized CDF tables.

This is the reference implementation used as a test oracle for the native
range coder and as a pure-Python fallback when the native library is not
built. State arithmetic uses Python integers, so there is no possibility
of overflow or platform-dependent behaviour.
"""

from __future__ import annotations

from collections.abc import Iterable

from .entropy import CDF_TOTAL, CdfTable
from .errors import CoderError

_NUM_STATE_BITS = 32
_FULL = 1 << _NUM_STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MASK = _FULL - 1


def validate_tables(tables: list[CdfTable]) -> None:
    for i, t in enumerate(tables):
        cdf = t.cdf
        if len(cdf) < 2:
            raise CoderError(f"table {i}: needs at least one symbol")
        if cdf[0] != 0 or cdf[-1] != CDF_TOTAL:
            raise CoderError(f"table {i}: cdf must run from 0 to {CDF_TOTAL}")
        if any(int(cdf[k + 1]) <= int(cdf[k]) for k in range(len(cdf) - 1)):
            raise CoderError(f"table {i}: cdf must be strictly increasing")


class _BitWriter:
    def __init__(self):
        self.data = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self.data.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def finish(self) -> bytes:
        while self._nbits:
            self.write(0)
        return bytes(self.data)


class _BitReader:
    """Returns 0 bits past the end of input (standard flush-padding
    behaviour); raises once reads clearly exceed the legitimate slack."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.limit = len(data) * 8 + _NUM_STATE_BITS

    def read(self) -> int:
        if self.pos >= self.limit:
            raise CoderError("payload truncated: decoder ran out of bits")
        byte_idx = self.pos >> 3
        bit = 0
        if byte_idx < len(self.data):
            bit = (self.data[byte_idx] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit


def rc_encode(
    symbols: Iterable[int], indexes: Iterable[int], tables: list[CdfTable]
) -> bytes:
    """Encode ``symbols`` where symbol t uses tables[indexes[t]]."""
    validate_tables(tables)
    out = _BitWriter()
    low, high, pending = 0, _MASK, 0

    def shift(bit: int) -> None:
        nonlocal pending
        out.write(bit)
        for _ in range(pending):
            out.write(bit ^ 1)
        pending = 0

    for s, idx in zip(symbols, indexes, strict=True):
        table = tables[idx]
        k = int(s) - table.offset
        if not 0 <= k < table.num_symbols:
            raise CoderError(
                f"symbol {s} outside table support "
                f"[{table.offset}, {table.offset + table.num_symbols - 1}]"
            )
        span = high - low + 1
        high = low + (span * int(table.cdf[k + 1])) // CDF_TOTAL - 1
        low = low + (span * int(table.cdf[k])) // CDF_TOTAL
        while True:
            if high < _HALF:
                shift(0)
            elif low >= _HALF:
                shift(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low = low << 1
            high = (high << 1) | 1
    pending += 1
    shift(1 if low >= _QUARTER else 0)
    return out.finish()


class StreamDecoder:
    """Incremental decoder: the table index for each symbol may depend on
    previously decoded symbols (autoregressive decoding loop)."""

    def __init__(self, data: bytes, tables: list[CdfTable]):
        validate_tables(tables)
        self.tables = tables
        self._bits = _BitReader(data)
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(_NUM_STATE_BITS):
            self._code = (self._code << 1) | self._bits.read()

    def next_symbol(self, table_index: int) -> int:
        table = self.tables[table_index]
        cdf = table.cdf
        span = self._high - self._low + 1
        value = ((self._code - self._low + 1) * CDF_TOTAL - 1) // span
        # binary search for the bin containing value
        lo, hi = 0, table.num_symbols - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if int(cdf[mid + 1]) <= value:
                lo = mid + 1
            else:
                hi = mid
        k = lo
        self._high = self._low + (span * int(cdf[k + 1])) // CDF_TOTAL - 1
        self._low = self._low + (span * int(cdf[k])) // CDF_TOTAL
        while True:
            if self._high < _HALF:
                pass
            elif self._low >= _HALF:
                self._low -= _HALF
                self._high -= _HALF
                self._code -= _HALF
            elif self._low >= _QUARTER and self._high < _HALF + _QUARTER:
                self._low -= _QUARTER
                self._high -= _QUARTER
                self._code -= _QUARTER
            else:
                break
            self._low <<= 1
            self._high = (self._high << 1) | 1
            self._code = (self._code << 1) | self._bits.read()
        return k + table.offset


def rc_decode(
    data: bytes, tables: list[CdfTable], indexes: Iterable[int], count: int
) -> list[int]:
    """Batch decode ``count`` symbols with precomputed table indexes."""
    indexes = list(indexes)
    if len(indexes) != count:
        raise CoderError(f"got {len(indexes)} indexes for {count} symbols")
    dec = StreamDecoder(data, tables)
    return [dec.next_symbol(idx) for idx in indexes]
