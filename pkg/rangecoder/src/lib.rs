//! Exact-integer arithmetic coder over 16-bit quantized CDF tables.
//!
//! The coder keeps a 32-bit [low, high] interval with pending-bit carry
//! handling and emits bits MSB-first, padding the final byte with zeros.
//! The decoder mirrors the interval arithmetic exactly and reads zero
//! bits past the end of the payload, up to the 32 bits of legitimate
//! flush slack; further reads are an error. All interval arithmetic is
//! widened to u64, so results are identical on every platform.
//!
//! The C ABI (`rc_encode`, `rc_decode`, `rc_stream_new`, `rc_stream_next`,
//! `rc_stream_free`, `rc_free`) codes symbol t with the CDF table selected
//! by `indexes[t]`; tables are passed flattened as per-table offsets,
//! lengths, and concatenated cumulative values (each running 0..=65536).

use std::os::raw::c_void;

pub const CDF_TOTAL: u64 = 1 << 16;

const NUM_STATE_BITS: u32 = 32;
const FULL: u64 = 1 << NUM_STATE_BITS;
const HALF: u64 = FULL >> 1;
const QUARTER: u64 = FULL >> 2;
const MASK: u64 = FULL - 1;

/// Error codes returned across the C ABI.
pub const RC_OK: i32 = 0;
pub const RC_ERR_BAD_TABLE: i32 = 1;
pub const RC_ERR_BAD_SYMBOL: i32 = 2;
pub const RC_ERR_TRUNCATED: i32 = 3;
pub const RC_ERR_BAD_INDEX: i32 = 4;
pub const RC_ERR_NULL: i32 = 5;

/// One entropy table: integer symbol offset plus a cumulative frequency
/// array `cdf` with `cdf[0] == 0` and `cdf.last() == CDF_TOTAL`.
#[derive(Clone, Debug)]
pub struct CdfTable {
    pub offset: i32,
    pub cdf: Vec<u32>,
}

impl CdfTable {
    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }
}

pub fn validate_tables(tables: &[CdfTable]) -> Result<(), i32> {
    for t in tables {
        if t.cdf.len() < 2 {
            return Err(RC_ERR_BAD_TABLE);
        }
        if t.cdf[0] != 0 || *t.cdf.last().unwrap() as u64 != CDF_TOTAL {
            return Err(RC_ERR_BAD_TABLE);
        }
        if t.cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RC_ERR_BAD_TABLE);
        }
    }
    Ok(())
}

struct BitWriter {
    data: Vec<u8>,
    acc: u8,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { data: Vec::new(), acc: 0, nbits: 0 }
    }

    fn write(&mut self, bit: u8) {
        self.acc = (self.acc << 1) | bit;
        self.nbits += 1;
        if self.nbits == 8 {
            self.data.push(self.acc);
            self.acc = 0;
            self.nbits = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        while self.nbits != 0 {
            self.write(0);
        }
        self.data
    }
}

/// Encode `symbols`, coding symbol t with `tables[indexes[t]]`.
pub fn encode(symbols: &[i32], indexes: &[u32], tables: &[CdfTable]) -> Result<Vec<u8>, i32> {
    validate_tables(tables)?;
    if symbols.len() != indexes.len() {
        return Err(RC_ERR_BAD_INDEX);
    }
    let mut out = BitWriter::new();
    let mut low: u64 = 0;
    let mut high: u64 = MASK;
    let mut pending: u64 = 0;

    let shift = |out: &mut BitWriter, pending: &mut u64, bit: u8| {
        out.write(bit);
        for _ in 0..*pending {
            out.write(bit ^ 1);
        }
        *pending = 0;
    };

    for (&s, &idx) in symbols.iter().zip(indexes) {
        let table = tables.get(idx as usize).ok_or(RC_ERR_BAD_INDEX)?;
        let k = (s as i64) - (table.offset as i64);
        if k < 0 || k as usize >= table.num_symbols() {
            return Err(RC_ERR_BAD_SYMBOL);
        }
        let k = k as usize;
        let span = high - low + 1;
        high = low + (span * table.cdf[k + 1] as u64) / CDF_TOTAL - 1;
        low += (span * table.cdf[k] as u64) / CDF_TOTAL;
        loop {
            if high < HALF {
                shift(&mut out, &mut pending, 0);
            } else if low >= HALF {
                shift(&mut out, &mut pending, 1);
                low -= HALF;
                high -= HALF;
            } else if low >= QUARTER && high < HALF + QUARTER {
                pending += 1;
                low -= QUARTER;
                high -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
        }
    }
    pending += 1;
    let last = if low >= QUARTER { 1 } else { 0 };
    shift(&mut out, &mut pending, last);
    Ok(out.finish())
}

/// Incremental decoder: the table index for each symbol may depend on
/// previously decoded symbols (autoregressive decoding loop).
pub struct StreamDecoder {
    tables: Vec<CdfTable>,
    data: Vec<u8>,
    pos: usize,
    limit: usize,
    low: u64,
    high: u64,
    code: u64,
}

impl StreamDecoder {
    pub fn new(data: &[u8], tables: Vec<CdfTable>) -> Result<Self, i32> {
        validate_tables(&tables)?;
        let mut dec = StreamDecoder {
            tables,
            data: data.to_vec(),
            pos: 0,
            limit: data.len() * 8 + NUM_STATE_BITS as usize,
            low: 0,
            high: MASK,
            code: 0,
        };
        for _ in 0..NUM_STATE_BITS {
            let bit = dec.read_bit()?;
            dec.code = (dec.code << 1) | bit;
        }
        Ok(dec)
    }

    fn read_bit(&mut self) -> Result<u64, i32> {
        if self.pos >= self.limit {
            return Err(RC_ERR_TRUNCATED);
        }
        let byte_idx = self.pos >> 3;
        let bit = if byte_idx < self.data.len() {
            (self.data[byte_idx] >> (7 - (self.pos & 7))) & 1
        } else {
            0
        };
        self.pos += 1;
        Ok(bit as u64)
    }

    pub fn next_symbol(&mut self, table_index: usize) -> Result<i32, i32> {
        let table = self.tables.get(table_index).ok_or(RC_ERR_BAD_INDEX)?;
        let span = self.high - self.low + 1;
        let value = ((self.code - self.low + 1) * CDF_TOTAL - 1) / span;
        let cdf = &table.cdf;
        let mut lo = 0usize;
        let mut hi = table.num_symbols() - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if (cdf[mid + 1] as u64) <= value {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let k = lo;
        let (cdf_lo, cdf_hi, offset) = (cdf[k] as u64, cdf[k + 1] as u64, table.offset);
        self.high = self.low + (span * cdf_hi) / CDF_TOTAL - 1;
        self.low += (span * cdf_lo) / CDF_TOTAL;
        loop {
            if self.high < HALF {
                // no renormalization offset
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.code -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.code -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            let bit = self.read_bit()?;
            self.code = (self.code << 1) | bit;
        }
        Ok(k as i32 + offset)
    }
}

/// Batch decode with precomputed table indexes.
pub fn decode(
    data: &[u8],
    indexes: &[u32],
    tables: &[CdfTable],
) -> Result<Vec<i32>, i32> {
    let mut dec = StreamDecoder::new(data, tables.to_vec())?;
    indexes
        .iter()
        .map(|&idx| dec.next_symbol(idx as usize))
        .collect()
}

// ---------------------------------------------------------------------------
// C ABI
// ---------------------------------------------------------------------------

unsafe fn tables_from_raw(
    offsets: *const i32,
    lengths: *const u32,
    n_tables: usize,
    values: *const u32,
) -> Vec<CdfTable> {
    let offsets = std::slice::from_raw_parts(offsets, n_tables);
    let lengths = std::slice::from_raw_parts(lengths, n_tables);
    let total: usize = lengths.iter().map(|&l| l as usize).sum();
    let values = std::slice::from_raw_parts(values, total);
    let mut tables = Vec::with_capacity(n_tables);
    let mut start = 0usize;
    for i in 0..n_tables {
        let len = lengths[i] as usize;
        tables.push(CdfTable {
            offset: offsets[i],
            cdf: values[start..start + len].to_vec(),
        });
        start += len;
    }
    tables
}

/// Encode into a heap buffer returned through `out_ptr`/`out_len`; the
/// caller releases it with `rc_free`. Returns 0 on success.
#[no_mangle]
pub unsafe extern "C" fn rc_encode(
    symbols: *const i32,
    indexes: *const u32,
    count: usize,
    offsets: *const i32,
    lengths: *const u32,
    n_tables: usize,
    values: *const u32,
    out_ptr: *mut *mut u8,
    out_len: *mut usize,
) -> i32 {
    if symbols.is_null() && count > 0 {
        return RC_ERR_NULL;
    }
    if out_ptr.is_null() || out_len.is_null() {
        return RC_ERR_NULL;
    }
    let tables = tables_from_raw(offsets, lengths, n_tables, values);
    let symbols = if count == 0 { &[][..] } else { std::slice::from_raw_parts(symbols, count) };
    let indexes = if count == 0 { &[][..] } else { std::slice::from_raw_parts(indexes, count) };
    match encode(symbols, indexes, &tables) {
        Ok(data) => {
            let boxed = data.into_boxed_slice();
            let len = boxed.len();
            *out_ptr = Box::into_raw(boxed) as *mut u8;
            *out_len = len;
            RC_OK
        }
        Err(code) => code,
    }
}

/// Release a buffer produced by `rc_encode`.
#[no_mangle]
pub unsafe extern "C" fn rc_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// Batch decode `count` symbols into the caller's `out` buffer.
#[no_mangle]
pub unsafe extern "C" fn rc_decode(
    data: *const u8,
    data_len: usize,
    indexes: *const u32,
    count: usize,
    offsets: *const i32,
    lengths: *const u32,
    n_tables: usize,
    values: *const u32,
    out: *mut i32,
) -> i32 {
    if (data.is_null() && data_len > 0) || (out.is_null() && count > 0) {
        return RC_ERR_NULL;
    }
    let tables = tables_from_raw(offsets, lengths, n_tables, values);
    let data = if data_len == 0 { &[][..] } else { std::slice::from_raw_parts(data, data_len) };
    let indexes = if count == 0 { &[][..] } else { std::slice::from_raw_parts(indexes, count) };
    match decode(data, indexes, &tables) {
        Ok(symbols) => {
            std::ptr::copy_nonoverlapping(symbols.as_ptr(), out, count);
            RC_OK
        }
        Err(code) => code,
    }
}

/// Create an incremental decoder; returns null if the tables are invalid.
#[no_mangle]
pub unsafe extern "C" fn rc_stream_new(
    data: *const u8,
    data_len: usize,
    offsets: *const i32,
    lengths: *const u32,
    n_tables: usize,
    values: *const u32,
) -> *mut c_void {
    if data.is_null() && data_len > 0 {
        return std::ptr::null_mut();
    }
    let tables = tables_from_raw(offsets, lengths, n_tables, values);
    let data = if data_len == 0 { &[][..] } else { std::slice::from_raw_parts(data, data_len) };
    match StreamDecoder::new(data, tables) {
        Ok(dec) => Box::into_raw(Box::new(dec)) as *mut c_void,
        Err(_) => std::ptr::null_mut(),
    }
}

/// Decode one symbol with the given table index. Returns 0 on success.
#[no_mangle]
pub unsafe extern "C" fn rc_stream_next(
    handle: *mut c_void,
    table_index: u32,
    out: *mut i32,
) -> i32 {
    if handle.is_null() || out.is_null() {
        return RC_ERR_NULL;
    }
    let dec = &mut *(handle as *mut StreamDecoder);
    match dec.next_symbol(table_index as usize) {
        Ok(symbol) => {
            *out = symbol;
            RC_OK
        }
        Err(code) => code,
    }
}

/// Release a decoder created by `rc_stream_new`.
#[no_mangle]
pub unsafe extern "C" fn rc_stream_free(handle: *mut c_void) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut StreamDecoder));
    }
}
