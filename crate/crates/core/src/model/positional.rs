//! Rotary embeddings and ALiBi biases.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokens::PositionId;

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `position * base^(-2i/len)`.
pub fn apply_rotary<F: Scalar>(vector: &[F], position: PositionId, base: f64) -> Result<Vec<F>> {
    if !vector.len().is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "rotary embedding needs an even length, got {}",
            vector.len()
        )));
    }
    let table = RotaryTable::new(vector.len(), position, base);
    let mut out = vector.to_vec();
    table.rotate(&mut out, false);
    Ok(out)
}

/// Cos/sin table for one position over one head.
#[derive(Debug, Clone)]
pub(crate) struct RotaryTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub(crate) fn new(head_dim: usize, position: PositionId, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(half);
        let mut sin = Vec::with_capacity(half);
        for i in 0..half {
            let inv_freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = position as f64 * inv_freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
        Self { cos, sin }
    }

    /// In-place rotation of one head vector; `inverse` applies the transpose.
    #[inline]
    pub(crate) fn rotate<F: Scalar>(&self, x: &mut [F], inverse: bool) {
        for i in 0..self.cos.len() {
            let c = F::of(self.cos[i]);
            let s = if inverse {
                F::of(-self.sin[i])
            } else {
                F::of(self.sin[i])
            };
            let a = x[2 * i];
            let b = x[2 * i + 1];
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Standard ALiBi slope table: a geometric sequence starting at
/// `2^(-8/n)` for a power-of-two head count, interleaved extension otherwise.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    fn pow2_slopes(n: usize) -> Vec<f64> {
        let start = 2f64.powf(-8.0 / n as f64);
        (1..=n).map(|i| start.powi(i as i32)).collect()
    }
    if n_heads == 0 {
        return Vec::new();
    }
    if n_heads.is_power_of_two() {
        return pow2_slopes(n_heads);
    }
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2_slopes(closest);
    let extra = pow2_slopes(2 * closest);
    slopes.extend(extra.into_iter().step_by(2).take(n_heads - closest));
    slopes
}

/// `-slope(head) * (query_pos - key_pos)`; only defined for visible keys.
pub fn alibi_bias(head_index: usize, n_heads: usize, query_pos: PositionId, key_pos: PositionId) -> Result<f64> {
    if key_pos > query_pos {
        return Err(Error::Invalid(format!(
            "alibi bias undefined for key position {key_pos} after query position {query_pos}"
        )));
    }
    if head_index >= n_heads {
        return Err(Error::Invalid(format!(
            "head {head_index} out of range for {n_heads} heads"
        )));
    }
    let slope = alibi_slopes(n_heads)[head_index];
    Ok(-slope * (query_pos - key_pos) as f64)
}
