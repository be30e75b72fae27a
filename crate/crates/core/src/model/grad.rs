//! Reverse-mode gradients of the decoder over a recorded forward tape.

use super::params::{ATTN_NORM, MLP_NORM, WK, WO, WQ, WV, W_DOWN, W_GATE, W_UP};
use super::positional::RotaryTable;
use super::{ModelConfig, Params, PosScheme, Tape, Transformer};
use crate::error::Result;
use crate::linalg::{axpy, dot, matmul_t_backward, rmsnorm_backward, sigmoid};
use crate::masking::MaskMatrix;
use crate::scalar::Scalar;
use crate::tokens::{PositionId, TokenId};

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub params: Params<F>,
    /// `[rows x d_model]`: gradient w.r.t. each row's input embedding.
    pub inputs: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(config: &ModelConfig, rows: usize) -> Self {
        Self {
            params: Params::zeros(config),
            inputs: vec![F::zero(); rows * config.d_model],
        }
    }

    pub fn input_row(&self, row: usize, d_model: usize) -> &[F] {
        &self.inputs[row * d_model..(row + 1) * d_model]
    }
}

/// Mean token cross-entropy over rows with a label. Returns the loss and
/// its gradient w.r.t. the logits.
pub fn cross_entropy<F: Scalar>(logits: &[F], vocab: usize, labels: &[Option<TokenId>]) -> (f64, Vec<F>) {
    let mut grad = vec![F::zero(); logits.len()];
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mx = row
            .iter()
            .copied()
            .fold(F::neg_infinity(), F::max)
            .to_f64()
            .unwrap_or(0.0);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap_or(0.0) - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += (z.ln() + mx - row[y as usize].to_f64().unwrap_or(0.0)) * scale;
        for (i, e) in exps.iter().enumerate() {
            let p = e / z - if i == y as usize { 1.0 } else { 0.0 };
            grad[r * vocab + i] = F::of(p * scale);
        }
    }
    (loss, grad)
}

/// Backpropagates `dlogits` (`[rows x vocab]`) through the recorded tape.
pub(crate) fn backward<F: Scalar>(model: &Transformer<F>, tape: &Tape<F>, dlogits: &[F]) -> Gradients<F> {
    let cfg = &model.config;
    let (d, n_heads, hd, ff, vocab) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let m = tape.tokens.len();
    let p = &model.params;
    let mut g = Gradients::zeros(cfg, m);
    if m == 0 {
        return g;
    }
    let scale = F::of(1.0 / (hd as f64).sqrt());

    let mut dhf = vec![F::zero(); m * d];
    matmul_t_backward(
        &tape.h_final,
        p.lm_head(),
        dlogits,
        m,
        d,
        vocab,
        &mut dhf,
        g.params.lm_head_mut(),
    );
    let mut dx = vec![F::zero(); m * d];
    rmsnorm_backward(
        &tape.x_final,
        p.final_norm(),
        &tape.inv_final,
        &dhf,
        m,
        d,
        &mut dx,
        g.params.final_norm_mut(),
    );

    let rotary: Option<Vec<RotaryTable>> = (cfg.pos_scheme == PosScheme::Rotary).then(|| {
        tape.positions
            .iter()
            .map(|&pos| RotaryTable::new(hd, pos, cfg.rotary_base))
            .collect()
    });

    for l in (0..cfg.n_layers).rev() {
        let lt = &tape.layers[l];

        // MLP block.
        let mut dact = vec![F::zero(); m * ff];
        matmul_t_backward(
            &lt.act,
            p.layer(l, W_DOWN),
            &dx,
            m,
            ff,
            d,
            &mut dact,
            g.params.layer_mut(l, W_DOWN),
        );
        let mut dgate = vec![F::zero(); m * ff];
        let mut dup = vec![F::zero(); m * ff];
        for i in 0..m * ff {
            let z = lt.gate[i];
            let s = sigmoid(z);
            dup[i] = dact[i] * z * s;
            dgate[i] = dact[i] * lt.up[i] * s * (F::one() + z * (F::one() - s));
        }
        let mut dh2 = vec![F::zero(); m * d];
        matmul_t_backward(
            &lt.h2,
            p.layer(l, W_GATE),
            &dgate,
            m,
            d,
            ff,
            &mut dh2,
            g.params.layer_mut(l, W_GATE),
        );
        matmul_t_backward(
            &lt.h2,
            p.layer(l, W_UP),
            &dup,
            m,
            d,
            ff,
            &mut dh2,
            g.params.layer_mut(l, W_UP),
        );
        let mut dx_mid = dx.clone();
        rmsnorm_backward(
            &lt.x_mid,
            p.layer(l, MLP_NORM),
            &lt.inv2,
            &dh2,
            m,
            d,
            &mut dx_mid,
            g.params.layer_mut(l, MLP_NORM),
        );

        // Attention block.
        let mut dattn = vec![F::zero(); m * d];
        matmul_t_backward(
            &lt.attn,
            p.layer(l, WO),
            &dx_mid,
            m,
            d,
            d,
            &mut dattn,
            g.params.layer_mut(l, WO),
        );
        let mut dq = vec![F::zero(); m * d];
        let mut dk = vec![F::zero(); m * d];
        let mut dv = vec![F::zero(); m * d];
        let mut dps = vec![F::zero(); m];
        for h in 0..n_heads {
            let off = h * hd;
            for t in 0..m {
                let probs = &lt.probs[h * m * m + t * m..h * m * m + (t + 1) * m];
                let da = &dattn[t * d + off..t * d + off + hd];
                let mut weighted = F::zero();
                for k in 0..=t {
                    if probs[k] == F::zero() {
                        continue;
                    }
                    dps[k] = dot(da, &lt.v[k * d + off..k * d + off + hd]);
                    weighted += probs[k] * dps[k];
                }
                for k in 0..=t {
                    let pk = probs[k];
                    if pk == F::zero() {
                        continue;
                    }
                    axpy(pk, da, &mut dv[k * d + off..k * d + off + hd]);
                    let ds = pk * (dps[k] - weighted) * scale;
                    axpy(
                        ds,
                        &lt.k[k * d + off..k * d + off + hd],
                        &mut dq[t * d + off..t * d + off + hd],
                    );
                    axpy(
                        ds,
                        &lt.q[t * d + off..t * d + off + hd],
                        &mut dk[k * d + off..k * d + off + hd],
                    );
                }
            }
        }
        if let Some(tables) = &rotary {
            for (t, table) in tables.iter().enumerate() {
                for h in 0..n_heads {
                    let o = t * d + h * hd;
                    table.rotate(&mut dq[o..o + hd], true);
                    table.rotate(&mut dk[o..o + hd], true);
                }
            }
        }
        let mut dh1 = vec![F::zero(); m * d];
        matmul_t_backward(
            &lt.h1,
            p.layer(l, WQ),
            &dq,
            m,
            d,
            d,
            &mut dh1,
            g.params.layer_mut(l, WQ),
        );
        matmul_t_backward(
            &lt.h1,
            p.layer(l, WK),
            &dk,
            m,
            d,
            d,
            &mut dh1,
            g.params.layer_mut(l, WK),
        );
        matmul_t_backward(
            &lt.h1,
            p.layer(l, WV),
            &dv,
            m,
            d,
            d,
            &mut dh1,
            g.params.layer_mut(l, WV),
        );
        let mut dx_in = dx_mid;
        rmsnorm_backward(
            &lt.x_in,
            p.layer(l, ATTN_NORM),
            &lt.inv1,
            &dh1,
            m,
            d,
            &mut dx_in,
            g.params.layer_mut(l, ATTN_NORM),
        );
        dx = dx_in;
    }

    let embed = g.params.embed_mut();
    for (t, &tok) in tape.tokens.iter().enumerate() {
        let tok = tok as usize;
        axpy(F::one(), &dx[t * d..(t + 1) * d], &mut embed[tok * d..(tok + 1) * d]);
    }
    g.inputs = dx;
    g
}

impl<F: Scalar> Transformer<F> {
    /// Cross-entropy on labeled rows of one uncached pass, with gradients.
    pub fn loss_and_grad(
        &self,
        tokens: &[TokenId],
        positions: &[PositionId],
        mask: Option<&MaskMatrix>,
        labels: &[Option<TokenId>],
    ) -> Result<(f64, Gradients<F>)> {
        let (out, tape) = self.forward_with_tape(tokens, positions, mask)?;
        let (loss, dlogits) = cross_entropy(&out.logits, out.vocab_size, labels);
        Ok((loss, backward(self, &tape, &dlogits)))
    }

    /// Gradient of an arbitrary logit cotangent, e.g. one row's loss only.
    pub fn vjp(
        &self,
        tokens: &[TokenId],
        positions: &[PositionId],
        mask: Option<&MaskMatrix>,
        dlogits: impl FnOnce(&[F], usize) -> Vec<F>,
    ) -> Result<Gradients<F>> {
        let (out, tape) = self.forward_with_tape(tokens, positions, mask)?;
        let dl = dlogits(&out.logits, out.vocab_size);
        Ok(backward(self, &tape, &dl))
    }
}
