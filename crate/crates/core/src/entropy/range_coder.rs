//! Range coder with 32-bit range and 64-bit low.
//!
//! Renormalizes one byte at a time whenever the range drops below 2^24. A
//! carry out of the low word is absorbed by the cached byte and the run of
//! pending `0xFF` bytes behind it, so no byte is ever rewritten after it
//! has been emitted. Binary symbols and 16-bit cumulative-frequency symbols
//! share the same state.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

/// Probability that a binary symbol is 1, in units of 2^-16.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantProb(u16);

impl QuantProb {
    pub const HALF: QuantProb = QuantProb(32768);

    /// `round(p * 65536)` clamped to `[1, 65535]`.
    pub fn new(p: f64) -> Result<Self> {
        if p.is_nan() {
            return Err(Error::NonFinite("probability is NaN".into()));
        }
        let q = (p * FREQ_TOTAL as f64).round().clamp(1.0, (FREQ_TOTAL - 1) as f64);
        Ok(Self(q as u16))
    }

    pub fn from_raw(p16: u16) -> Result<Self> {
        if p16 == 0 {
            return Err(Error::NonFinite("quantized probability must be non-zero".into()));
        }
        Ok(Self(p16))
    }

    pub fn raw(self) -> u16 {
        self.0
    }

    pub fn p_one(self) -> f64 {
        self.0 as f64 / FREQ_TOTAL as f64
    }

    /// Ideal code length of `bit` in bits.
    pub fn cost(self, bit: bool) -> f64 {
        let p = if bit { self.0 as f64 } else { (FREQ_TOTAL - self.0 as u32) as f64 };
        -(p / FREQ_TOTAL as f64).log2()
    }
}

pub fn quantize_prob(p: f64) -> Result<QuantProb> {
    QuantProb::new(p)
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, pending: 1, started: false, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                // The very first cached byte is always zero and never carries.
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                } else {
                    debug_assert_eq!(byte.wrapping_add(carry), 0);
                    self.started = true;
                }
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_bit(&mut self, q: QuantProb, bit: bool) {
        let bound = (self.range >> FREQ_BITS) * q.0 as u32;
        if bit {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        self.normalize();
    }

    /// Codes a symbol occupying `[cum, cum + freq)` of a 2^16 total.
    pub fn encode_freq(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * cum as u64;
        self.range = if cum + freq == FREQ_TOTAL { self.range - r * cum } else { r * freq };
        self.normalize();
    }

    /// Bytes emitted so far (excluding what is still held in the state).
    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = Self { code: 0, range: u32::MAX, buf, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.buf.get(self.pos).ok_or(Error::Underflow)?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, q: QuantProb) -> Result<bool> {
        let bound = (self.range >> FREQ_BITS) * q.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            true
        } else {
            self.code -= bound;
            self.range -= bound;
            false
        };
        self.normalize()?;
        Ok(bit)
    }

    /// Returns the target value in `[0, 2^16)` used to look up the next
    /// multi-symbol; follow with [`RangeDecoder::consume`].
    pub fn peek_freq(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        (self.code / r).min(FREQ_TOTAL - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> FREQ_BITS;
        self.code = self
            .code
            .checked_sub(r * cum)
            .ok_or_else(|| Error::Decode("symbol interval does not contain the code".into()))?;
        self.range = if cum + freq == FREQ_TOTAL { self.range - r * cum } else { r * freq };
        if self.code >= self.range {
            return Err(Error::Decode("symbol interval does not contain the code".into()));
        }
        self.normalize()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}
