use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::scalar::Scalar;

/// A named, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![F::zero(); n],
        }
    }
}

/// Per-layer tensor slots, in storage order.
pub(crate) const ATTN_NORM: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const MLP_NORM: usize = 5;
pub(crate) const W_GATE: usize = 6;
pub(crate) const W_UP: usize = 7;
pub(crate) const W_DOWN: usize = 8;
const PER_LAYER: usize = 9;

/// All model parameters (also reused as a gradient buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tensors: Vec<Tensor<F>>,
    n_layers: usize,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let mut tensors = vec![Tensor::zeros("tok_embed", vec![config.vocab_size, d])];
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            tensors.push(Tensor::zeros(p("attn_norm"), vec![d]));
            tensors.push(Tensor::zeros(p("wq"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wk"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wv"), vec![d, d]));
            tensors.push(Tensor::zeros(p("wo"), vec![d, d]));
            tensors.push(Tensor::zeros(p("mlp_norm"), vec![d]));
            tensors.push(Tensor::zeros(p("w_gate"), vec![config.d_ff, d]));
            tensors.push(Tensor::zeros(p("w_up"), vec![config.d_ff, d]));
            tensors.push(Tensor::zeros(p("w_down"), vec![d, config.d_ff]));
        }
        tensors.push(Tensor::zeros("final_norm", vec![d]));
        tensors.push(Tensor::zeros("lm_head", vec![config.vocab_size, d]));
        Self {
            tensors,
            n_layers: config.n_layers,
        }
    }

    /// Scaled Gaussian init. Every tensor draws from its own ChaCha stream
    /// keyed on `(seed, name)`, so values do not depend on tensor order.
    pub fn init(config: &ModelConfig) -> Self {
        let mut params = Self::zeros(config);
        for t in &mut params.tensors {
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|v| *v = F::one());
                continue;
            }
            let fan_in = t.shape[1] as f64;
            let std = if t.name == "tok_embed" {
                1.0
            } else {
                fan_in.sqrt().recip()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(fnv1a(t.name.as_bytes()));
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut t.data {
                *v = F::of(normal.sample(&mut rng));
            }
        }
        params
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    #[inline]
    pub(crate) fn embed(&self) -> &[F] {
        &self.tensors[0].data
    }

    #[inline]
    pub(crate) fn layer(&self, l: usize, slot: usize) -> &[F] {
        &self.tensors[1 + l * PER_LAYER + slot].data
    }

    #[inline]
    pub(crate) fn layer_mut(&mut self, l: usize, slot: usize) -> &mut [F] {
        &mut self.tensors[1 + l * PER_LAYER + slot].data
    }

    #[inline]
    pub(crate) fn final_norm(&self) -> &[F] {
        &self.tensors[1 + self.n_layers * PER_LAYER].data
    }

    #[inline]
    pub(crate) fn lm_head(&self) -> &[F] {
        &self.tensors[2 + self.n_layers * PER_LAYER].data
    }

    pub(crate) fn embed_mut(&mut self) -> &mut [F] {
        &mut self.tensors[0].data
    }

    pub(crate) fn final_norm_mut(&mut self) -> &mut [F] {
        let i = 1 + self.n_layers * PER_LAYER;
        &mut self.tensors[i].data
    }

    pub(crate) fn lm_head_mut(&mut self) -> &mut [F] {
        let i = 2 + self.n_layers * PER_LAYER;
        &mut self.tensors[i].data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::of(v.to_f64().unwrap())).collect(),
                })
                .collect(),
            n_layers: self.n_layers,
        }
    }

    /// FNV-1a over the raw bits of every tensor, in storage order.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tensors {
            bytes.extend_from_slice(t.name.as_bytes());
            for v in &t.data {
                v.write_le(&mut bytes);
            }
        }
        fnv1a(&bytes)
    }

    pub(crate) fn from_tensors(tensors: Vec<Tensor<F>>, n_layers: usize) -> Self {
        Self { tensors, n_layers }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
