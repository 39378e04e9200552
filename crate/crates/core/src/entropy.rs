//! Integer arithmetic coding of occupancy symbols under per-node tables.
//!
//! The model's floating-point distributions are quantized to [`FreqTable`]s
//! with a fixed total of `2^16`; the coder itself only ever sees integers.
//! The coder is the classic 32-bit low/high design with pending
//! (bit-plus-follow) underflow handling and a two-bit flush. Bits are written
//! MSB-first.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::context_model::ProbDist255;
use crate::octree::OccupancySymbol;
use crate::{Error, Result};

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;

const CODE_BITS: u32 = 32;
const TOP: u64 = (1 << CODE_BITS) - 1;
const HALF: u64 = 1 << (CODE_BITS - 1);
const QUARTER: u64 = 1 << (CODE_BITS - 2);
const THREE_QUARTERS: u64 = 3 * QUARTER;

/// Integer frequencies for the 255 symbols, summing to [`TOTAL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    counts: [u32; 255],
    cumulative: [u32; 256],
}

impl FreqTable {
    pub fn new(counts: [u32; 255]) -> Result<Self> {
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Container(format!("frequency of symbol {} is zero", j + 1)));
        }
        let mut cumulative = [0u32; 256];
        for j in 0..255 {
            cumulative[j + 1] = cumulative[j]
                .checked_add(counts[j])
                .ok_or_else(|| Error::Container("frequency table overflows".into()))?;
        }
        if cumulative[255] != TOTAL {
            return Err(Error::Container(format!("frequencies sum to {}, expected {TOTAL}", cumulative[255])));
        }
        Ok(Self { counts, cumulative })
    }

    pub fn uniform() -> Self {
        quantize_dist(&ProbDist255::uniform())
    }

    pub fn counts(&self) -> &[u32; 255] {
        &self.counts
    }

    pub fn cumulative(&self) -> &[u32; 256] {
        &self.cumulative
    }

    pub fn count(&self, s: OccupancySymbol) -> u32 {
        self.counts[s.get() as usize - 1]
    }

    /// Ideal code length of `s` under this table, in bits.
    pub fn cost(&self, s: OccupancySymbol) -> f64 {
        -libm::log2(self.count(s) as f64 / TOTAL as f64)
    }

    /// The table with every count moved one symbol up (cyclically).
    pub fn rotated(&self) -> Self {
        let mut counts = [0u32; 255];
        for j in 0..255 {
            counts[(j + 1) % 255] = self.counts[j];
        }
        Self::new(counts).expect("rotation preserves the invariants")
    }
}

/// Rounds `p * 2^16` with a floor of one count, then restores the exact total
/// by largest-remainder adjustment (ties go to the lower symbol).
pub fn quantize_dist(p: &ProbDist255) -> FreqTable {
    let target: [f64; 255] = core::array::from_fn(|j| p.get(j + 1) * TOTAL as f64);
    let mut counts: [u32; 255] = core::array::from_fn(|j| (libm::round(target[j]) as u32).max(1));
    let mut diff = TOTAL as i64 - counts.iter().map(|&c| c as i64).sum::<i64>();
    let mut order: [usize; 255] = core::array::from_fn(|j| j);
    while diff != 0 {
        let rem = |j: usize| target[j] - counts[j] as f64;
        if diff > 0 {
            order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            for &j in order.iter().take(diff as usize) {
                counts[j] += 1;
            }
            diff -= diff.min(255);
        } else {
            order.sort_by(|&a, &b| rem(a).partial_cmp(&rem(b)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            let mut taken = 0;
            for &j in order.iter() {
                if taken == -diff {
                    break;
                }
                if counts[j] > 1 {
                    counts[j] -= 1;
                    taken += 1;
                }
            }
            diff += taken;
        }
    }
    FreqTable::new(counts).expect("quantization keeps every count positive and the total exact")
}

/// Coded payload: bytes plus the number of meaningful bits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitstream {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl Bitstream {
    pub fn from_parts(bytes: Vec<u8>, bit_len: u64) -> Result<Self> {
        if bit_len > 8 * bytes.len() as u64 || bit_len + 7 < 8 * bytes.len() as u64 {
            return Err(Error::Container(format!("{bit_len} bits do not fit {} bytes", bytes.len())));
        }
        Ok(Self { bytes, bit_len })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    fn push(&mut self, bit: bool) {
        if self.bit_len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte allocated") |= 0x80 >> (self.bit_len % 8);
        }
        self.bit_len += 1;
    }

    /// Bit `i`, or zero past the end.
    fn bit(&self, i: u64) -> u64 {
        if i >= self.bit_len {
            return 0;
        }
        ((self.bytes[(i / 8) as usize] >> (7 - i % 8)) & 1) as u64
    }
}

pub struct ArithmeticEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: Bitstream,
}

impl Default for ArithmeticEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithmeticEncoder {
    pub fn new() -> Self {
        Self { low: 0, high: TOP, pending: 0, out: Bitstream::default() }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, table: &FreqTable, symbol: OccupancySymbol) {
        let j = symbol.get() as usize - 1;
        let range = self.high - self.low + 1;
        let total = TOTAL as u64;
        self.high = self.low + range * table.cumulative[j + 1] as u64 / total - 1;
        self.low += range * table.cumulative[j] as u64 / total;
        assert!(self.low <= self.high && self.high <= TOP, "coder interval collapsed");
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        debug_assert!(self.high - self.low >= QUARTER);
    }

    /// Emits two disambiguating bits (plus pending ones) and pads to a byte.
    pub fn finish(mut self) -> Bitstream {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out
    }
}

pub struct ArithmeticDecoder<'a> {
    bits: &'a Bitstream,
    pos: u64,
    low: u64,
    high: u64,
    value: u64,
    shifts: u64,
    decoded: usize,
}

impl<'a> ArithmeticDecoder<'a> {
    pub fn new(bits: &'a Bitstream) -> Self {
        let value = (0..CODE_BITS as u64).fold(0, |acc, i| (acc << 1) | bits.bit(i));
        Self { bits, pos: CODE_BITS as u64, low: 0, high: TOP, value, shifts: 0, decoded: 0 }
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<OccupancySymbol> {
        let node = self.decoded;
        let range = self.high - self.low + 1;
        let total = TOTAL as u64;
        if self.value < self.low || self.value > self.high {
            return Err(Error::Integrity { node, reason: "code value left the coding interval".into() });
        }
        let target = ((self.value - self.low + 1) * total - 1) / range;
        let j = table.cumulative[1..].partition_point(|&c| (c as u64) <= target);
        if j >= 255 {
            return Err(Error::Integrity { node, reason: "code value beyond the table total".into() });
        }
        self.high = self.low + range * table.cumulative[j + 1] as u64 / total - 1;
        self.low += range * table.cumulative[j] as u64 / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.bits.bit(self.pos);
            self.pos += 1;
            self.shifts += 1;
        }
        // a valid stream never needs more than CODE_BITS - 2 bits of zero fill
        if self.pos > self.bits.bit_len + CODE_BITS as u64 - 2 {
            return Err(Error::Truncated { node });
        }
        self.decoded += 1;
        Ok(OccupancySymbol::new(j as u32 + 1).expect("index in range"))
    }

    /// Symbols decoded so far.
    pub fn decoded(&self) -> usize {
        self.decoded
    }

    /// Checks that the stream ends exactly where the encoder's flush put it.
    pub fn finish(self) -> Result<()> {
        let expected = self.shifts + 2;
        if expected != self.bits.bit_len {
            return Err(Error::Integrity {
                node: self.decoded,
                reason: format!("stream has {} bits, decoding consumed {expected}", self.bits.bit_len),
            });
        }
        Ok(())
    }
}

/// Codes `symbols` in order, each under its own table.
pub fn encode<'t, I>(symbols: I) -> Bitstream
where
    I: IntoIterator<Item = (OccupancySymbol, &'t FreqTable)>,
{
    let mut enc = ArithmeticEncoder::new();
    for (s, t) in symbols {
        enc.encode(t, s);
    }
    enc.finish()
}

/// Decodes `count` symbols; `next_table(i, decoded)` must regenerate the
/// table the encoder used for position `i`.
pub fn decode<F>(bits: &Bitstream, count: usize, mut next_table: F) -> Result<Vec<OccupancySymbol>>
where
    F: FnMut(usize, &[OccupancySymbol]) -> Result<FreqTable>,
{
    let mut dec = ArithmeticDecoder::new(bits);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = next_table(i, &out)?;
        out.push(dec.decode(&table)?);
    }
    dec.finish()?;
    Ok(out)
}

/// `sum -log2(count / total)` over the coded symbols.
pub fn ideal_bits<'t, I>(symbols: I) -> f64
where
    I: IntoIterator<Item = (OccupancySymbol, &'t FreqTable)>,
{
    symbols.into_iter().map(|(s, t)| t.cost(s)).sum()
}
