//! Integer frequency tables and the windowed discretized-Laplace coding model.
//!
//! All floating-point work here goes through `libm` so that encoder and
//! decoder build identical tables on every platform.

use super::range_coder::{RangeDecoder, RangeEncoder, FREQ_TOTAL};
use crate::error::{invalid, Error, Result};

/// Cumulative frequency table over `n` symbols, summing to [`FREQ_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes probabilities to frequencies `max(1, round(p * T))` and appends an
    /// escape symbol holding the remainder (at least 1). Overshoot is trimmed from
    /// the largest frequencies.
    pub fn with_escape(probs: &[f64]) -> Result<Self> {
        let mut freqs = Vec::with_capacity(probs.len() + 1);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("probability {p} outside [0, 1]")));
            }
            freqs.push((libm::round(p * FREQ_TOTAL as f64) as u32).max(1));
        }
        freqs.push(0);
        Self::fill_escape(freqs)
    }

    /// A table over exactly the given probabilities (no escape); each must lie in `(0, 1]`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.len() > FREQ_TOTAL as usize {
            return Err(invalid(format!("alphabet of {} symbols", probs.len())));
        }
        let mut freqs = Vec::with_capacity(probs.len());
        for &p in probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(invalid(format!("probability {p} outside (0, 1]")));
            }
            freqs.push((libm::round(p * FREQ_TOTAL as f64) as u32).max(1));
        }
        let sum: u64 = freqs.iter().map(|&f| f as u64).sum();
        if sum < FREQ_TOTAL as u64 {
            // hand the slack to the most probable symbol
            let top = argmax(&freqs);
            freqs[top] += FREQ_TOTAL - sum as u32;
        }
        trim(&mut freqs)?;
        Ok(Self::from_freqs(&freqs))
    }

    fn fill_escape(mut freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() > FREQ_TOTAL as usize {
            return Err(invalid(format!("alphabet of {} symbols", freqs.len())));
        }
        let esc = freqs.len() - 1;
        let sum: u64 = freqs[..esc].iter().map(|&f| f as u64).sum();
        freqs[esc] = (FREQ_TOTAL as u64).saturating_sub(sum).max(1) as u32;
        trim(&mut freqs)?;
        Ok(Self::from_freqs(&freqs))
    }

    fn from_freqs(freqs: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        Self { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn encode(&self, enc: &mut RangeEncoder, s: usize) -> Result<()> {
        if s >= self.len() {
            return Err(invalid(format!("symbol {s} outside alphabet of {}", self.len())));
        }
        enc.encode(self.cum[s], self.freq(s))
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<usize> {
        let t = dec.target();
        // last s with cum[s] <= t
        let s = self.cum.partition_point(|&c| c <= t) - 1;
        dec.consume(self.cum[s], self.freq(s))?;
        Ok(s)
    }

    /// Ideal code length of symbol `s` under the quantized table.
    pub fn bits(&self, s: usize) -> f64 {
        -libm::log2(self.freq(s) as f64 / FREQ_TOTAL as f64)
    }
}

fn argmax(f: &[u32]) -> usize {
    let mut best = 0;
    for (i, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = i;
        }
    }
    best
}

/// Removes any excess over the total from the largest frequencies, keeping each ≥ 1.
fn trim(freqs: &mut [u32]) -> Result<()> {
    let mut sum: u64 = freqs.iter().map(|&f| f as u64).sum();
    while sum > FREQ_TOTAL as u64 {
        let top = argmax(freqs);
        let take = (sum - FREQ_TOTAL as u64).min(freqs[top] as u64 - 1);
        if take == 0 {
            return Err(invalid("alphabet too large for the frequency total"));
        }
        freqs[top] -= take as u32;
        sum -= take;
    }
    Ok(())
}

/// Mass of a Laplace(0, b) distribution on `[lo, hi]`.
fn laplace_mass(lo: f64, hi: f64, b: f64) -> f64 {
    let width = hi - lo;
    if lo >= 0.0 {
        0.5 * libm::exp(-lo / b) * -libm::expm1(-width / b)
    } else if hi <= 0.0 {
        0.5 * libm::exp(hi / b) * -libm::expm1(-width / b)
    } else {
        1.0 - 0.5 * libm::exp(lo / b) - 0.5 * libm::exp(-hi / b)
    }
}

/// Scale above which values are split into a coded high part and raw low bits.
const BIN_SCALE_LIMIT: f64 = 128.0;
/// Cap on the window half-width.
pub const MAX_RADIUS: i64 = 4096;

/// How one Laplace-distributed integer is coded: `z = (h << shift) | raw`, where
/// `h` is coded with a window of `2 * radius + 1` bins around `center` plus an escape
/// and `raw` holds `shift` uniform bits.
#[derive(Clone, Debug)]
pub struct LaplaceCodingModel {
    shift: u32,
    center: i64,
    radius: i64,
    table: FreqTable,
}

impl LaplaceCodingModel {
    pub fn new(mu: f64, b: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() || !mu.is_finite() {
            return Err(Error::NonFinite(format!("Laplace coding parameters mu={mu} b={b}")));
        }
        let mut shift = 0u32;
        while b / (1u64 << shift) as f64 > BIN_SCALE_LIMIT && shift < 30 {
            shift += 1;
        }
        let unit = (1u64 << shift) as f64;
        // bin h covers [h, h+1) after mapping x -> (x + 1/2) / 2^shift
        let m = (mu + 0.5) / unit;
        let bs = b / unit;
        let center = libm::floor(m).clamp(-(1i64 << 40) as f64, (1i64 << 40) as f64) as i64;
        let radius = (libm::ceil(12.0 * bs) as i64 + 1).clamp(1, MAX_RADIUS);
        let probs: Vec<f64> = (center - radius..=center + radius)
            .map(|h| laplace_mass(h as f64 - m, h as f64 + 1.0 - m, bs).clamp(0.0, 1.0))
            .collect();
        Ok(Self { shift, center, radius, table: FreqTable::with_escape(&probs)? })
    }

    fn escape(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    pub fn encode(&self, enc: &mut RangeEncoder, z: i32) -> Result<()> {
        let h = (z as i64) >> self.shift;
        let raw = (z as i64 - (h << self.shift)) as u32;
        let off = h - (self.center - self.radius);
        if (0..=2 * self.radius).contains(&off) {
            self.table.encode(enc, off as usize)?;
        } else {
            self.table.encode(enc, self.escape())?;
            enc.encode_bits(h as i32 as u32, 32);
        }
        enc.encode_bits(raw, self.shift);
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let s = self.table.decode(dec)?;
        let h = if s == self.escape() {
            dec.decode_bits(32)? as i32 as i64
        } else {
            self.center - self.radius + s as i64
        };
        let raw = dec.decode_bits(self.shift)? as i64;
        let z = (h << self.shift) + raw;
        i32::try_from(z).map_err(|_| Error::Format(format!("decoded value {z} outside 32-bit range")))
    }

    /// Code length in bits of `z` under this model (excluding coder overhead).
    pub fn bits(&self, z: i32) -> f64 {
        let h = (z as i64) >> self.shift;
        let off = h - (self.center - self.radius);
        let head = if (0..=2 * self.radius).contains(&off) {
            self.table.bits(off as usize)
        } else {
            self.table.bits(self.escape()) + 32.0
        };
        head + self.shift as f64
    }
}
