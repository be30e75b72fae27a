//! Latency and compute accounting.
//!
//! Analytic multiply-accumulate count of one forward call over `m` new tokens
//! against `c` cached entries, with causal attention:
//!
//! ```text
//! MACs(c, m) = n_layers * ( 4 m d^2                    q, k, v, o projections
//!                         + 2 d (m c + m (m + 1) / 2)  scores and value mixing
//!                         + 3 m d d_ff )               gated MLP
//!            + m d V                                   output head
//! FLOPs(c, m) = 2 MACs(c, m) + m d                     (+ embedding lookup)
//! ```

use serde::{Deserialize, Serialize};

use crate::engine::StreamTrace;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokens::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub vocab_size: u64,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_layers: config.n_layers as u64,
            d_model: config.d_model as u64,
            d_ff: config.d_ff as u64,
            vocab_size: config.vocab_size as u64,
        }
    }

    pub fn from_dims(n_layers: usize, d_model: usize, d_ff: usize, vocab_size: usize) -> Self {
        Self {
            n_layers: n_layers as u64,
            d_model: d_model as u64,
            d_ff: d_ff as u64,
            vocab_size: vocab_size as u64,
        }
    }

    /// FLOPs of the forward calls recorded in `trace`, priced with this
    /// model's dimensions. The call schedule does not depend on the model
    /// width, so a trace from a small model can be priced at any size.
    pub fn trace_flops(&self, trace: &StreamTrace) -> f64 {
        trace
            .steps
            .iter()
            .flat_map(|s| s.forwards.iter())
            .map(|&(c, m)| self.flops_forward(c, m))
            .sum()
    }

    /// Per-layer projection MACs per new token.
    pub fn projection_coeff(&self) -> u64 {
        4 * self.d_model * self.d_model
    }

    /// Per-layer attention MACs per (query, visible key) pair.
    pub fn attention_coeff(&self) -> u64 {
        2 * self.d_model
    }

    pub fn mlp_coeff(&self) -> u64 {
        3 * self.d_model * self.d_ff
    }

    pub fn head_coeff(&self) -> u64 {
        self.d_model * self.vocab_size
    }

    fn macs_exact(&self, c: u64, m: u64) -> u128 {
        let (c, m) = (c as u128, m as u128);
        let pairs = m * c + m * (m + 1) / 2;
        let per_layer =
            self.projection_coeff() as u128 * m + self.attention_coeff() as u128 * pairs + self.mlp_coeff() as u128 * m;
        self.n_layers as u128 * per_layer + self.head_coeff() as u128 * m
    }

    pub fn macs_forward(&self, cached: usize, new: usize) -> f64 {
        self.macs_exact(cached as u64, new as u64) as f64
    }

    pub fn flops_forward(&self, cached: usize, new: usize) -> f64 {
        let macs = self.macs_exact(cached as u64, new as u64);
        (2 * macs + new as u128 * self.d_model as u128) as f64
    }
}

/// Sum of per-step FLOPs.
pub fn cumulative_flops(trace: &StreamTrace) -> f64 {
    trace.steps.iter().map(|s| s.flops).sum()
}

fn check_delays(g: &[usize], src_len: usize) -> Result<()> {
    if g.is_empty() {
        return Err(Error::Delays("empty delay sequence".into()));
    }
    if src_len == 0 {
        return Err(Error::Delays("source length must be positive".into()));
    }
    for (j, w) in g.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::Delays(format!(
                "g decreases between targets {} and {}",
                j + 1,
                j + 2
            )));
        }
    }
    if let Some(&last) = g.last() {
        if last > src_len {
            return Err(Error::Delays(format!("g reaches {last} > |S| = {src_len}")));
        }
    }
    Ok(())
}

fn lagging(g: &[usize], src_len: usize, tgt_len_for_rate: usize, hyp_len: usize) -> f64 {
    let gamma = tgt_len_for_rate as f64 / src_len as f64;
    let tau = g
        .iter()
        .position(|&x| x == src_len)
        .map_or(hyp_len, |i| i + 1)
        .min(g.len())
        .max(1);
    let sum: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(i, &gj)| gj as f64 - i as f64 / gamma)
        .sum();
    sum / tau as f64
}

/// Length-adaptive average lagging: the rate uses `max(|T|, |T_ref|)`.
pub fn laal(g: &[usize], src_len: usize, hyp_len: usize, ref_len: usize) -> Result<f64> {
    check_delays(g, src_len)?;
    if hyp_len == 0 || ref_len == 0 {
        return Err(Error::Delays("lengths must be positive".into()));
    }
    Ok(lagging(g, src_len, hyp_len.max(ref_len), hyp_len))
}

/// Plain average lagging with the hypothesis length as the rate.
pub fn average_lagging(g: &[usize], src_len: usize, hyp_len: usize) -> Result<f64> {
    check_delays(g, src_len)?;
    if hyp_len == 0 {
        return Err(Error::Delays("hypothesis length must be positive".into()));
    }
    Ok(lagging(g, src_len, hyp_len, hyp_len))
}

/// Position-wise matches over the longer of the two sequences.
pub fn token_accuracy(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    let denom = hyp.len().max(reference.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

/// One row of the strategy/policy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub policy: String,
    pub k_or_n: usize,
    pub laal: f64,
    pub cum_gflops: f64,
    pub token_accuracy: f64,
}
