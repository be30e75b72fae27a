//! Minimal decoder-only transformer whose forward pass takes explicit
//! per-token position ids.
//!
//! Blocks are pre-norm: RMS norm, multi-head attention (rotary or ALiBi),
//! RMS norm, SiLU-gated MLP. The forward pass supports incremental decoding
//! against a [`KvCache`] and arbitrary visibility masks, and can record an
//! activation tape for [`grad::backward`].

pub mod checkpoint;
pub mod config;
pub mod grad;
pub mod params;
pub mod positional;

pub use config::{ModelConfig, PosScheme};
pub use params::{Params, Tensor};
pub use positional::{alibi_bias, alibi_slopes, apply_rotary};

use crate::error::{Error, Result};
use crate::kv_cache::{CacheDelta, KvCache};
use crate::linalg::{axpy, dot, matmul_t, rmsnorm, sigmoid, softmax_in_place};
use crate::masking::MaskMatrix;
use crate::scalar::Scalar;
use crate::tokens::{PositionId, Tag, TokenId};
use params::{ATTN_NORM, MLP_NORM, WK, WO, WQ, WV, W_DOWN, W_GATE, W_UP};
use positional::RotaryTable;

/// Which cached and new entries each new token may attend to.
#[derive(Debug, Clone, Copy)]
pub enum Visibility<'a> {
    /// Every cache entry plus a causal pattern over the new tokens.
    CausalOverCache,
    /// One row per new token, one column per (cache entry + new token).
    Mask(&'a MaskMatrix),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a, F> {
    pub tokens: &'a [TokenId],
    pub positions: &'a [PositionId],
    pub tags: &'a [Tag],
    pub visibility: Visibility<'a>,
    pub cache: Option<&'a KvCache<F>>,
}

impl<'a, F> ForwardInput<'a, F> {
    pub fn new(tokens: &'a [TokenId], positions: &'a [PositionId], tags: &'a [Tag]) -> Self {
        Self {
            tokens,
            positions,
            tags,
            visibility: Visibility::CausalOverCache,
            cache: None,
        }
    }

    pub fn visibility(mut self, visibility: Visibility<'a>) -> Self {
        self.visibility = visibility;
        self
    }

    pub fn cache(mut self, cache: &'a KvCache<F>) -> Self {
        self.cache = Some(cache);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `[tokens x vocab_size]`, row-major.
    pub logits: Vec<F>,
    pub vocab_size: usize,
    pub delta: CacheDelta<F>,
    /// Multiply-accumulates actually executed (instrumentation counter).
    pub macs: u64,
}

impl<F> ForwardOutput<F> {
    pub fn rows(&self) -> usize {
        self.logits.len().checked_div(self.vocab_size).unwrap_or(0)
    }

    pub fn row(&self, t: usize) -> &[F] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn last_row(&self) -> Option<&[F]> {
        self.rows().checked_sub(1).map(|t| self.row(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

/// Activations saved by an uncached forward pass for reverse-mode gradients.
#[derive(Debug, Clone)]
pub(crate) struct Tape<F> {
    pub(crate) tokens: Vec<TokenId>,
    pub(crate) positions: Vec<PositionId>,
    pub(crate) layers: Vec<LayerTape<F>>,
    pub(crate) x_final: Vec<F>,
    pub(crate) inv_final: Vec<F>,
    pub(crate) h_final: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTape<F> {
    pub(crate) x_in: Vec<F>,
    pub(crate) inv1: Vec<F>,
    pub(crate) h1: Vec<F>,
    pub(crate) q: Vec<F>,
    pub(crate) k: Vec<F>,
    pub(crate) v: Vec<F>,
    /// `[heads x rows x rows]`, zero where not visible.
    pub(crate) probs: Vec<F>,
    pub(crate) attn: Vec<F>,
    pub(crate) x_mid: Vec<F>,
    pub(crate) inv2: Vec<F>,
    pub(crate) h2: Vec<F>,
    pub(crate) gate: Vec<F>,
    pub(crate) up: Vec<F>,
    pub(crate) act: Vec<F>,
}

impl<F: Scalar> Transformer<F> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<F>::zeros(&config);
        if expected.tensors.len() != params.tensors.len()
            || expected
                .tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Config("parameter tensors do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward(&self, input: &ForwardInput<'_, F>) -> Result<ForwardOutput<F>> {
        self.forward_impl(input, None, None)
    }

    /// Uncached logits with `offset` (rows x d_model) added to the token
    /// embeddings; used for finite-difference probes of input gradients.
    pub(crate) fn logits_with_input_offset(
        &self,
        tokens: &[TokenId],
        positions: &[PositionId],
        mask: Option<&MaskMatrix>,
        offset: &[F],
    ) -> Result<Vec<F>> {
        if offset.len() != tokens.len() * self.config.d_model {
            return Err(Error::Shape("input offset must be rows x d_model".into()));
        }
        let tags = vec![Tag::Source; tokens.len()];
        let visibility = match mask {
            Some(m) => Visibility::Mask(m),
            None => Visibility::CausalOverCache,
        };
        let input = ForwardInput::new(tokens, positions, &tags).visibility(visibility);
        Ok(self.forward_impl(&input, None, Some(offset))?.logits)
    }

    /// Uncached forward pass that also returns the activation tape.
    pub(crate) fn forward_with_tape(
        &self,
        tokens: &[TokenId],
        positions: &[PositionId],
        mask: Option<&MaskMatrix>,
    ) -> Result<(ForwardOutput<F>, Tape<F>)> {
        let tags = vec![Tag::Source; tokens.len()];
        let visibility = match mask {
            Some(m) => Visibility::Mask(m),
            None => Visibility::CausalOverCache,
        };
        let input = ForwardInput::new(tokens, positions, &tags).visibility(visibility);
        let mut tape = Tape {
            tokens: tokens.to_vec(),
            positions: positions.to_vec(),
            layers: Vec::with_capacity(self.config.n_layers),
            x_final: Vec::new(),
            inv_final: Vec::new(),
            h_final: Vec::new(),
        };
        let out = self.forward_impl(&input, Some(&mut tape), None)?;
        Ok((out, tape))
    }

    fn validate_input(&self, input: &ForwardInput<'_, F>) -> Result<()> {
        let m = input.tokens.len();
        if input.positions.len() != m || input.tags.len() != m {
            return Err(Error::Shape(format!(
                "{} tokens, {} positions, {} tags",
                m,
                input.positions.len(),
                input.tags.len()
            )));
        }
        for &p in input.positions {
            if p >= self.config.max_position {
                return Err(Error::PositionOverflow {
                    position: p,
                    max_position: self.config.max_position,
                });
            }
        }
        for &t in input.tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Invalid(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let c = input.cache.map_or(0, |k| k.len());
        if let Some(cache) = input.cache {
            if cache.n_layers() != self.config.n_layers || cache.width() != self.config.d_model {
                return Err(Error::Cache("cache shape does not match the model".into()));
            }
        }
        if let Visibility::Mask(mask) = input.visibility {
            if mask.rows() != m || mask.cols() != c + m {
                return Err(Error::Mask(format!(
                    "mask is {}x{}, expected {}x{}",
                    mask.rows(),
                    mask.cols(),
                    m,
                    c + m
                )));
            }
            for t in 0..m {
                for col in c + t + 1..c + m {
                    if mask.get(t, col) {
                        return Err(Error::Mask(format!(
                            "row {t} sees column {col}, beyond the causal envelope"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        input: &ForwardInput<'_, F>,
        mut tape: Option<&mut Tape<F>>,
        offset: Option<&[F]>,
    ) -> Result<ForwardOutput<F>> {
        self.validate_input(input)?;
        let cfg = &self.config;
        let (d, n_heads, hd, ff, vocab) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let m = input.tokens.len();
        let c = input.cache.map_or(0, |k| k.len());
        let mut delta = CacheDelta::empty(cfg.n_layers);
        if m == 0 {
            return Ok(ForwardOutput {
                logits: Vec::new(),
                vocab_size: vocab,
                delta,
                macs: 0,
            });
        }
        let p = &self.params;
        let mut macs = 0u64;

        let mut x = Vec::with_capacity(m * d);
        for &t in input.tokens {
            let t = t as usize;
            x.extend_from_slice(&p.embed()[t * d..(t + 1) * d]);
        }
        if let Some(off) = offset {
            for (xi, &o) in x.iter_mut().zip(off) {
                *xi += o;
            }
        }

        let rotary: Option<Vec<RotaryTable>> = (cfg.pos_scheme == PosScheme::Rotary).then(|| {
            input
                .positions
                .iter()
                .map(|&pos| RotaryTable::new(hd, pos, cfg.rotary_base))
                .collect()
        });
        let slopes = match cfg.pos_scheme {
            PosScheme::Alibi => alibi_slopes(n_heads),
            _ => Vec::new(),
        };
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mask = match input.visibility {
            Visibility::Mask(mk) => Some(mk),
            Visibility::CausalOverCache => None,
        };

        let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
        let mut scores: Vec<F> = Vec::with_capacity(c + m);
        let mut visible: Vec<usize> = Vec::with_capacity(c + m);

        for l in 0..cfg.n_layers {
            let (h1, inv1) = rmsnorm(&x, p.layer(l, ATTN_NORM), m, d);
            macs += matmul_t(&h1, p.layer(l, WQ), m, d, d, &mut q);
            macs += matmul_t(&h1, p.layer(l, WK), m, d, d, &mut k);
            macs += matmul_t(&h1, p.layer(l, WV), m, d, d, &mut v);
            if let Some(tables) = &rotary {
                for (t, table) in tables.iter().enumerate() {
                    for hh in 0..n_heads {
                        let off = t * d + hh * hd;
                        table.rotate(&mut q[off..off + hd], false);
                        table.rotate(&mut k[off..off + hd], false);
                    }
                }
            }

            let mut probs = if tape.is_some() {
                vec![F::zero(); n_heads * m * m]
            } else {
                Vec::new()
            };
            let mut attn = vec![F::zero(); m * d];
            for hh in 0..n_heads {
                let off = hh * hd;
                for t in 0..m {
                    let qv = &q[t * d + off..t * d + off + hd];
                    let qpos = input.positions[t];
                    scores.clear();
                    visible.clear();
                    for col in 0..c + t + 1 {
                        if let Some(mk) = mask {
                            if !mk.get(t, col) {
                                continue;
                            }
                        }
                        let (kv, kpos) = if col < c {
                            let cache = input.cache.expect("cache present when c > 0");
                            (&cache.key(l, col)[off..off + hd], cache.positions()[col])
                        } else {
                            let r = col - c;
                            (&k[r * d + off..r * d + off + hd], input.positions[r])
                        };
                        let mut s = dot(qv, kv) * scale;
                        if !slopes.is_empty() {
                            // Signed distance: keys placed after the query get a positive bias.
                            s += F::of(-slopes[hh] * (qpos as f64 - kpos as f64));
                        }
                        scores.push(s);
                        visible.push(col);
                        macs += hd as u64;
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut attn[t * d + off..t * d + off + hd];
                    for (&pr, &col) in scores.iter().zip(&visible) {
                        let vv = if col < c {
                            let cache = input.cache.expect("cache present when c > 0");
                            &cache.value(l, col)[off..off + hd]
                        } else {
                            let r = col - c;
                            &v[r * d + off..r * d + off + hd]
                        };
                        axpy(pr, vv, out);
                        macs += hd as u64;
                        if tape.is_some() {
                            probs[hh * m * m + t * m + (col - c)] = pr;
                        }
                    }
                }
            }

            let mut o = Vec::new();
            macs += matmul_t(&attn, p.layer(l, WO), m, d, d, &mut o);
            let x_in = std::mem::take(&mut x);
            let mut x_mid = x_in.clone();
            for (xi, oi) in x_mid.iter_mut().zip(&o) {
                *xi += *oi;
            }

            let (h2, inv2) = rmsnorm(&x_mid, p.layer(l, MLP_NORM), m, d);
            let (mut gate, mut up, mut down) = (Vec::new(), Vec::new(), Vec::new());
            macs += matmul_t(&h2, p.layer(l, W_GATE), m, d, ff, &mut gate);
            macs += matmul_t(&h2, p.layer(l, W_UP), m, d, ff, &mut up);
            let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
            macs += matmul_t(&act, p.layer(l, W_DOWN), m, ff, d, &mut down);
            x = x_mid.clone();
            for (xi, di) in x.iter_mut().zip(&down) {
                *xi += *di;
            }

            delta.keys[l] = k.clone();
            delta.values[l] = v.clone();
            if let Some(tp) = tape.as_deref_mut() {
                tp.layers.push(LayerTape {
                    x_in,
                    inv1,
                    h1,
                    q: q.clone(),
                    k: k.clone(),
                    v: v.clone(),
                    probs,
                    attn,
                    x_mid,
                    inv2,
                    h2,
                    gate,
                    up,
                    act,
                });
            }
        }

        let (hf, invf) = rmsnorm(&x, p.final_norm(), m, d);
        let mut logits = Vec::new();
        macs += matmul_t(&hf, p.lm_head(), m, d, vocab, &mut logits);
        if let Some(tp) = tape {
            tp.x_final = x;
            tp.inv_final = invf;
            tp.h_final = hf;
        }
        delta.positions = input.positions.to_vec();
        delta.tags = input.tags.to_vec();
        Ok(ForwardOutput {
            logits,
            vocab_size: vocab,
            delta,
            macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(pos: PosScheme) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            vocab_size: 20,
            pos_scheme: pos,
            max_position: 256,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            vocab_size: 64,
            seed: 7,
            ..ModelConfig::default()
        };
        let a = Transformer::<f32>::init(cfg.clone()).unwrap();
        let b = Transformer::<f32>::init(cfg).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn different_seeds_differ() {
        let a = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let b = Transformer::<f32>::init(ModelConfig {
            seed: 4,
            ..small(PosScheme::Rotary)
        })
        .unwrap();
        assert_ne!(a.params.fingerprint(), b.params.fingerprint());
    }

    #[test]
    fn odd_rotary_head_dim_is_rejected() {
        let cfg = ModelConfig {
            d_model: 14,
            n_heads: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(Transformer::<f32>::init(cfg), Err(Error::Config(_))));
        let alibi = ModelConfig {
            d_model: 14,
            n_heads: 2,
            pos_scheme: PosScheme::Alibi,
            ..ModelConfig::default()
        };
        assert!(Transformer::<f32>::init(alibi).is_ok());
    }

    #[test]
    fn non_divisible_heads_are_rejected() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(Transformer::<f32>::init(cfg).is_err());
    }

    #[test]
    fn embedding_shape_and_param_count() {
        let cfg = small(PosScheme::Rotary);
        let model = Transformer::<f64>::init(cfg.clone()).unwrap();
        assert_eq!(
            model.params.get("tok_embed").unwrap().shape,
            vec![cfg.vocab_size, cfg.d_model]
        );
        assert_eq!(model.params.count(), cfg.param_count());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let model = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let out = model.forward(&ForwardInput::new(&[], &[], &[])).unwrap();
        assert!(out.logits.is_empty());
        assert!(out.delta.is_empty());
    }

    #[test]
    fn position_budget_is_enforced() {
        let model = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let err = model
            .forward(&ForwardInput::new(&[7], &[256], &[Tag::Source]))
            .unwrap_err();
        assert!(matches!(err, Error::PositionOverflow { .. }));
    }

    #[test]
    fn mask_shape_is_checked() {
        let model = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let mask = MaskMatrix::causal(3);
        let tags = [Tag::Source; 2];
        let r = model.forward(&ForwardInput::new(&[7, 8], &[0, 1], &tags).visibility(Visibility::Mask(&mask)));
        assert!(matches!(r, Err(Error::Mask(_))));
    }

    fn incremental_matches_batch(pos: PosScheme) {
        let model = Transformer::<f64>::init(small(pos)).unwrap();
        let tokens = [6u32, 9, 12, 7, 19, 8];
        let positions = [0usize, 1, 4, 5, 9, 10];
        let tags = [Tag::Source; 6];
        let full = model.forward(&ForwardInput::new(&tokens, &positions, &tags)).unwrap();

        let mut cache = KvCache::for_model(&model);
        let mut last = Vec::new();
        for i in 0..tokens.len() {
            let out = model
                .forward(&ForwardInput::new(&tokens[i..=i], &positions[i..=i], &tags[i..=i]).cache(&cache))
                .unwrap();
            last = out.row(0).to_vec();
            // Every intermediate row matches too.
            for (a, b) in out.row(0).iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10, "row {i}: {a} vs {b}");
            }
            cache.append(out.delta).unwrap();
        }
        for (a, b) in last.iter().zip(full.row(5)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn incremental_matches_batch_rotary() {
        incremental_matches_batch(PosScheme::Rotary);
    }

    #[test]
    fn incremental_matches_batch_alibi() {
        incremental_matches_batch(PosScheme::Alibi);
    }

    #[test]
    fn no_positional_scheme_ignores_positions() {
        let model = Transformer::<f64>::init(small(PosScheme::None)).unwrap();
        let tokens = [6u32, 9, 12, 7];
        let tags = [Tag::Source; 4];
        let a = model
            .forward(&ForwardInput::new(&tokens, &[0, 1, 2, 3], &tags))
            .unwrap();
        let b = model
            .forward(&ForwardInput::new(&tokens, &[40, 7, 90, 3], &tags))
            .unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn rotary_keys_are_cached_post_rotation() {
        let model = Transformer::<f64>::init(small(PosScheme::Rotary)).unwrap();
        let tags = [Tag::Source];
        let at0 = model.forward(&ForwardInput::new(&[9], &[0], &tags)).unwrap();
        let at5 = model.forward(&ForwardInput::new(&[9], &[5], &tags)).unwrap();
        // Layer 0 keys depend only on the token, so they differ exactly by the rotation.
        let hd = model.config.head_dim();
        for h in 0..model.config.n_heads {
            let raw = &at0.delta.keys[0][h * hd..(h + 1) * hd];
            let rotated = apply_rotary(raw, 5, model.config.rotary_base).unwrap();
            for (a, b) in rotated.iter().zip(&at5.delta.keys[0][h * hd..(h + 1) * hd]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaps_in_positions_are_deterministic() {
        let model = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let tags = [Tag::Source; 3];
        let run = || {
            model
                .forward(&ForwardInput::new(&[6, 7, 8], &[0, 17, 40], &tags))
                .unwrap()
                .logits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn instrumented_macs_match_closed_form() {
        let model = Transformer::<f32>::init(small(PosScheme::Rotary)).unwrap();
        let tags = [Tag::Source; 5];
        let out = model
            .forward(&ForwardInput::new(&[6, 7, 8, 9, 10], &[0, 1, 2, 3, 4], &tags))
            .unwrap();
        let fm = crate::metrics::FlopsModel::new(&model.config);
        assert_eq!(out.macs as f64, fm.macs_forward(0, 5));
    }
}
