//! Entropy coding and the dataset container.

pub mod bitstream;
pub mod model;
pub mod range_coder;
pub mod rates;

pub use bitstream::{decode_dataset, encode_dataset, read_stream_header, BitAllocation, DatasetContent, StreamHeader};
pub use model::{FreqTable, LaplaceCodingModel};
pub use range_coder::{RangeDecoder, RangeEncoder, FREQ_TOTAL};
pub use rates::{bpc, bpc_of_bytes, hard_label_bits, label_entropy_bound, soft_label_rate_bound};

use crate::error::Result;

/// Range-codes `symbols`; `prob_fn` receives the symbols coded so far and returns
/// the probability of every alphabet entry for the next one.
pub fn range_encode<P>(symbols: &[usize], mut prob_fn: P) -> Result<Vec<u8>>
where
    P: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut enc = RangeEncoder::new();
    for i in 0..symbols.len() {
        let table = FreqTable::from_probs(&prob_fn(&symbols[..i])?)?;
        table.encode(&mut enc, symbols[i])?;
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`] for `count` symbols under the same model.
pub fn range_decode<P>(bytes: &[u8], mut prob_fn: P, count: usize) -> Result<Vec<usize>>
where
    P: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let table = FreqTable::from_probs(&prob_fn(&out)?)?;
        out.push(table.decode(&mut dec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_sequence_is_flush_only() {
        let out = range_encode(&[], |_| Ok(vec![0.5, 0.5])).unwrap();
        assert_eq!(out.len(), 2);
        assert!(range_decode(&out, |_| Ok(vec![0.5, 0.5]), 0).unwrap().is_empty());
    }

    #[test]
    fn fair_bits_cost_one_bit_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let out = range_encode(&s, |_| Ok(vec![0.5, 0.5])).unwrap();
        assert!((125..=127).contains(&out.len()), "{}", out.len());
        assert_eq!(range_decode(&out, |_| Ok(vec![0.5, 0.5]), 1000).unwrap(), s);
    }

    #[test]
    fn adaptive_model_round_trip() {
        // a causal model: next-symbol probabilities depend on the history
        let model = |h: &[usize]| -> Result<Vec<f64>> {
            let last = h.last().copied().unwrap_or(0);
            let mut p = vec![0.1 / 3.0; 4];
            p[last] = 0.9;
            Ok(p)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = vec![0usize];
        for _ in 0..2000 {
            let last = *s.last().unwrap();
            s.push(if rng.random_bool(0.9) { last } else { rng.random_range(0..4) });
        }
        let out = range_encode(&s, model).unwrap();
        assert_eq!(range_decode(&out, model, s.len()).unwrap(), s);
    }

    #[test]
    fn rejects_invalid_probabilities() {
        assert!(range_encode(&[0], |_| Ok(vec![0.0, 1.0])).is_err());
        assert!(range_encode(&[0], |_| Ok(vec![1.2])).is_err());
        assert!(range_encode(&[2], |_| Ok(vec![0.5, 0.5])).is_err());
    }
}
