//! Bits-per-class and label-rate arithmetic.

use crate::error::{invalid, Result};

/// Bits per class: total bits divided by the number of classes.
pub fn bpc(total_bits: u64, num_classes: usize) -> Result<f64> {
    if num_classes == 0 {
        return Err(invalid("bpc needs at least one class"));
    }
    Ok(total_bits as f64 / num_classes as f64)
}

/// Bits per class of a stream from its byte length.
pub fn bpc_of_bytes(bytes: usize, num_classes: usize) -> Result<f64> {
    bpc(8 * bytes as u64, num_classes)
}

/// Bits of `per_class` raw images of `h x w x c` values at `depth` bits each.
pub fn raw_bits_per_class(h: usize, w: usize, c: usize, depth: usize, per_class: usize) -> u64 {
    (h * w * c * depth * per_class) as u64
}

/// Fixed-length bits per stored hard label: `ceil(log2 K)`.
pub fn hard_label_bits(num_classes: usize) -> u32 {
    if num_classes <= 1 {
        0
    } else {
        usize::BITS - (num_classes - 1).leading_zeros()
    }
}

/// Empirical label entropy plus one bit: the per-label bound of an ideal prefix code.
pub fn label_entropy_bound(labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    let h: f64 = counts.values().map(|&c| {
        let p = c as f64 / n;
        -p * p.log2()
    }).sum();
    h + 1.0
}

/// Bits to store one soft label over `K` classes whose entries are quantized to
/// precision `eps`: `-log2((K-1)!) - (K-1) log2(eps)`.
pub fn soft_label_rate_bound(num_classes: usize, eps: f64) -> Result<f64> {
    if num_classes < 2 {
        return Err(invalid("soft-label bound needs K >= 2"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("soft-label precision must lie in (0, 1), got {eps}")));
    }
    let k1 = (num_classes - 1) as f64;
    let log2_fact = libm::lgamma(num_classes as f64) / std::f64::consts::LN_2;
    Ok(-log2_fact - k1 * eps.log2())
}
