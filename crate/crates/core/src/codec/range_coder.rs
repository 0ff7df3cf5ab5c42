//! Carry-propagating range coder with a 48-bit low window, 64-bit state and
//! 16-bit output words (little-endian on the wire).
//!
//! Frequencies are on a fixed total of 2^16. The encoder never emits the
//! leading cache word, and flushing leaves at most two trailing zero words
//! implicit; the decoder supplies those as phantom zeros.

use crate::error::{invalid, Error, Result};

/// Bits of the frequency total.
pub const FREQ_BITS: u32 = 16;
/// Frequency total.
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const WINDOW: u32 = 48;
const WORD: u32 = 16;
const TOP: u64 = 1 << WINDOW;
const BOTTOM: u64 = 1 << (WINDOW - WORD);
const WORD_MASK: u64 = 0xFFFF;
/// Words past the end the decoder may read as zeros.
const MAX_PHANTOM: u32 = 2;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u16,
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
        Self { low: 0, range: TOP - 1, cache: 0, pending: 1, started: false, out: Vec::new() }
    }

    fn emit(&mut self, word: u16) {
        if self.started {
            self.out.extend_from_slice(&word.to_le_bytes());
        } else {
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if self.low < (WORD_MASK << (WINDOW - WORD)) || self.low >= TOP {
            let carry = (self.low >> WINDOW) as u16;
            let mut word = self.cache;
            while self.pending > 0 {
                self.emit(word.wrapping_add(carry));
                word = 0xFFFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> (WINDOW - WORD)) & WORD_MASK) as u16;
        }
        self.pending += 1;
        self.low = (self.low & (BOTTOM - 1)) << WORD;
    }

    fn normalize(&mut self) {
        while self.range < BOTTOM {
            self.range <<= WORD;
            self.shift_low();
        }
    }

    /// Codes the interval `[cum, cum + freq)` of the total [`FREQ_TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) -> Result<()> {
        if freq == 0 || cum as u64 + freq as u64 > FREQ_TOTAL as u64 {
            return Err(invalid(format!("bad interval [{cum}, {cum}+{freq}) of {FREQ_TOTAL}")));
        }
        let r = self.range >> FREQ_BITS;
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        self.normalize();
        Ok(())
    }

    /// Codes the low `bits` bits of `value` with a uniform distribution.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        let mut left = bits;
        while left > 0 {
            let n = left.min(WORD);
            left -= n;
            let v = ((value as u64) >> left) & ((1 << n) - 1);
            let r = self.range >> n;
            self.low += r * v;
            self.range = r;
            self.normalize();
        }
    }

    /// Flushes the state and returns the coded bytes.
    pub fn finish(mut self) -> Vec<u8> {
        // any value in [low, low + range) identifies the stream; pick the one
        // whose low 32 bits are zero so they need not be written
        self.low = (self.low + BOTTOM - 1) & !(BOTTOM - 1);
        self.shift_low();
        self.shift_low();
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    phantom: u32,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() % 2 != 0 {
            return Err(Error::Format("range-coded payload has odd length".into()));
        }
        let mut d = Self { data, pos: 0, phantom: 0, code: 0, range: TOP - 1 };
        for _ in 0..WINDOW / WORD {
            d.code = (d.code << WORD) | d.next_word()? as u64;
        }
        Ok(d)
    }

    fn next_word(&mut self) -> Result<u16> {
        if self.pos + 2 <= self.data.len() {
            let w = u16::from_le_bytes([self.data[self.pos], self.data[self.pos + 1]]);
            self.pos += 2;
            Ok(w)
        } else {
            self.phantom += 1;
            if self.phantom > MAX_PHANTOM {
                return Err(Error::Truncated("range-coded payload"));
            }
            Ok(0)
        }
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < BOTTOM {
            self.code = ((self.code << WORD) | self.next_word()? as u64) & (TOP - 1);
            self.range <<= WORD;
        }
        Ok(())
    }

    /// Position of the next symbol within [`FREQ_TOTAL`]; follow with [`Self::consume`].
    pub fn target(&self) -> u32 {
        let r = self.range >> FREQ_BITS;
        ((self.code / r) as u32).min(FREQ_TOTAL - 1)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        let r = self.range >> FREQ_BITS;
        let lo = r * cum as u64;
        if freq == 0 || self.code < lo {
            return Err(Error::Format("range decoder desynchronized".into()));
        }
        self.code -= lo;
        self.range = r * freq as u64;
        self.normalize()
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let mut value = 0u64;
        let mut left = bits;
        while left > 0 {
            let n = left.min(WORD);
            left -= n;
            let r = self.range >> n;
            let v = (self.code / r).min((1 << n) - 1);
            self.code -= r * v;
            self.range = r;
            self.normalize()?;
            value = (value << n) | v;
        }
        Ok(value as u32)
    }

    /// Words consumed so far, excluding phantoms.
    pub fn words_read(&self) -> usize {
        self.pos / 2
    }
}
