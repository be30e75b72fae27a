//! Checks that no target's loss depends on source tokens its policy has not
//! read yet.

use serde::{Deserialize, Serialize};

use super::sample::TrainingSample;
use crate::error::Result;
use crate::model::grad::cross_entropy;
use crate::model::Transformer;
use crate::scalar::Scalar;
use crate::tokens::{Tag, TokenId};

/// Finite-difference agreement required of a hidden pair.
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityReport {
    /// Pairs (j, i) with i > g(j).
    pub constrained_pairs: usize,
    /// Offending pairs as (target j, source i), both counted from 1.
    pub violations: Vec<(usize, usize)>,
    /// Largest reverse-mode gradient entry over constrained pairs.
    pub max_abs_grad: f64,
    /// Largest finite-difference slope over constrained pairs, when probed.
    pub max_fd: Option<f64>,
}

impl VisibilityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn row_loss_labels(rows: usize, row: usize, label: TokenId) -> Vec<Option<TokenId>> {
    let mut labels = vec![None; rows];
    labels[row] = Some(label);
    labels
}

/// For every emitted token j and source i > g(j), the gradient of the loss of
/// token j w.r.t. the input embedding of s_i must be exactly zero. With
/// `fd_step`, each pair is also probed by a central difference along a fixed
/// direction.
pub fn grad_visibility_check<F: Scalar>(
    model: &Transformer<F>,
    sample: &TrainingSample,
    fd_step: Option<f64>,
) -> Result<VisibilityReport> {
    let tokens = sample.layout.tokens();
    let positions = sample.layout.positions();
    let n = tokens.len();
    let d = model.config.d_model;
    let source_rows: Vec<usize> = (0..n)
        .filter(|&r| sample.layout.entries[r].tag == Tag::Source)
        .collect();
    let mut report = VisibilityReport {
        constrained_pairs: 0,
        violations: Vec::new(),
        max_abs_grad: 0.0,
        max_fd: fd_step.map(|_| 0.0),
    };
    for (j, row) in sample.prediction_rows().into_iter().enumerate() {
        let gj = sample.g[j];
        if gj >= source_rows.len() {
            continue;
        }
        let label = sample.emitted[j];
        let labels = row_loss_labels(n, row, label);
        let grads = model.vjp(&tokens, &positions, Some(&sample.mask), |logits, vocab| {
            cross_entropy(logits, vocab, &labels).1
        })?;
        let loss_at = |offset: &[F]| -> Result<f64> {
            let logits = model.logits_with_input_offset(&tokens, &positions, Some(&sample.mask), offset)?;
            Ok(cross_entropy(&logits, model.config.vocab_size, &labels).0)
        };
        for (i0, &src_row) in source_rows.iter().enumerate().skip(gj) {
            report.constrained_pairs += 1;
            let grad = grads.input_row(src_row, d);
            let worst = grad
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::INFINITY).abs())
                .fold(0.0, f64::max);
            report.max_abs_grad = report.max_abs_grad.max(worst);
            let mut bad = grad.iter().any(|v| *v != F::zero());
            if let Some(h) = fd_step {
                let u = F::of(h / (d as f64).sqrt());
                let mut offset = vec![F::zero(); n * d];
                offset[src_row * d..(src_row + 1) * d].fill(u);
                let plus = loss_at(&offset)?;
                offset[src_row * d..(src_row + 1) * d].fill(-u);
                let minus = loss_at(&offset)?;
                let slope = ((plus - minus) / (2.0 * h)).abs();
                report.max_fd = report.max_fd.map(|m| m.max(slope));
                bad |= slope.is_nan() || slope > FD_TOLERANCE;
            }
            if bad {
                report.violations.push((j + 1, i0 + 1));
            }
        }
    }
    Ok(report)
}
