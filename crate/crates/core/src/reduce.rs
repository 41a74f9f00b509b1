//! The server-side weighted mean shared by statistics and model-delta
//! aggregation.

use crate::error::{Error, Result};

/// `sum_k (w_k / W) * parts[k]`, accumulated in slice order.
///
/// Each part is scaled by its normalized weight before summation, so a single
/// part (weight fraction exactly 1.0) comes back bit-for-bit.
pub fn weighted_mean(parts: &[&[f64]], weights: &[u64]) -> Result<Vec<f64>> {
    let first = parts.first().ok_or(Error::EmptyList("weighted_mean"))?;
    if parts.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: parts.len(),
            got: weights.len(),
        });
    }
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::InvalidConfig("weighted mean with zero total weight".into()));
    }
    let mut out = vec![0.0; first.len()];
    for (part, &w) in parts.iter().zip(weights) {
        if part.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: part.len(),
            });
        }
        let frac = w as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(part.iter()) {
            *o += frac * v;
        }
    }
    Ok(out)
}
