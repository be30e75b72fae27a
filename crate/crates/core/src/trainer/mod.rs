//! Toy trainer: slot-structured training data, an Adam loop, streaming
//! evaluation and gradient-visibility checks.

pub mod corpus;
pub mod optim;
pub mod sample;
pub mod visibility;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{Pair, Task, ToyCorpus, ToyCorpusSpec};
pub use optim::{Adam, OptimConfig};
pub use sample::{
    build_from_delays, build_sample, build_training_sequence, closed_form_length, policy_targets, segment_source,
    SampleConfig, TrainingSample, Variant,
};
pub use visibility::{grad_visibility_check, VisibilityReport};

use crate::engine::{run_stream, EngineConfig, Strategy};
use crate::error::{Error, Result};
use crate::layout::RoleLens;
use crate::metrics::token_accuracy;
use crate::model::Transformer;
use crate::policy::PolicySpec;
use crate::scalar::Scalar;
use crate::tokens::{PositionId, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sample: SampleConfig,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per step over the labeled rows of the batch.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

struct Prepared {
    tokens: Vec<TokenId>,
    positions: Vec<PositionId>,
    sample: TrainingSample,
    rows: usize,
}

pub fn train<F: Scalar>(model: &mut Transformer<F>, corpus: &ToyCorpus, config: &TrainConfig) -> Result<TrainReport> {
    if corpus.spec.vocab_size > model.config.vocab_size {
        return Err(Error::Invalid(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.spec.vocab_size, model.config.vocab_size
        )));
    }
    let opt = &config.optim;
    if opt.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let prepared = corpus
        .training_pairs()
        .iter()
        .map(|p| {
            let sample = build_sample(&p.source, &p.target, &config.sample)?;
            Ok(Prepared {
                tokens: sample.layout.tokens(),
                positions: sample.layout.positions(),
                rows: sample.labels.iter().filter(|l| l.is_some()).count(),
                sample,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(&model.params);
    let mut report = TrainReport::default();
    for step in 0..opt.steps {
        let mut grads: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for _ in 0..opt.batch_size {
            let p = &prepared[rng.random_range(0..prepared.len())];
            let (loss, g) = model.loss_and_grad(&p.tokens, &p.positions, Some(&p.sample.mask), &p.sample.labels)?;
            let w = p.rows as f64;
            loss_sum += loss * w;
            rows += p.rows;
            for (acc, t) in grads.iter_mut().zip(&g.params.tensors) {
                for (a, &v) in acc.iter_mut().zip(&t.data) {
                    *a += w * v.to_f64().unwrap_or(f64::NAN);
                }
            }
        }
        let denom = rows.max(1) as f64;
        let loss = loss_sum / denom;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        grads.iter_mut().flatten().for_each(|g| *g /= denom);
        let norm = adam.step(&mut model.params, &grads, opt, opt.lr_at(step));
        report.losses.push(loss);
        report.grad_norms.push(norm);
    }
    Ok(report)
}

/// Engine configuration matching a training setup, optionally with a
/// different slot length at inference.
pub fn inference_config(sample: &SampleConfig, infer_l_slot: Option<usize>) -> EngineConfig {
    let strategy = match sample.variant {
        Variant::WithoutSlot => Strategy::NaiveReuse,
        _ => Strategy::ExPost {
            l_slot: infer_l_slot.unwrap_or(sample.l_slot),
        },
    };
    EngineConfig::new(sample.policy, strategy)
        .roles(sample.roles)
        .record_replay(false)
}

/// Mean greedy streaming token accuracy over corpus pairs `range`.
pub fn evaluate<F: Scalar>(
    model: &Transformer<F>,
    corpus: &ToyCorpus,
    range: std::ops::Range<usize>,
    engine: &EngineConfig,
) -> Result<f64> {
    let pairs = corpus.pairs(range);
    if pairs.is_empty() {
        return Err(Error::Invalid("empty evaluation range".into()));
    }
    let mut total = 0.0;
    for p in &pairs {
        let trace = run_stream(model, &p.source, engine.clone())?;
        total += token_accuracy(&trace.content_output(), &p.target);
    }
    Ok(total / pairs.len() as f64)
}

/// Mean materialized training length (tokens, roles and pads) over the
/// training split.
pub fn avg_sequence_length(corpus: &ToyCorpus, l_slot: usize, roles: RoleLens, policy: &PolicySpec) -> Result<f64> {
    let pairs = corpus.training_pairs();
    let mut total = 0usize;
    for p in &pairs {
        total += build_training_sequence(&p.source, &p.target, l_slot, policy, roles)?
            .layout
            .len();
    }
    Ok(total as f64 / pairs.len() as f64)
}

/// The same mean from the closed-form count.
pub fn avg_closed_form_length(corpus: &ToyCorpus, l_slot: usize, roles: RoleLens, policy: &PolicySpec) -> Result<f64> {
    let pairs = corpus.training_pairs();
    let mut total = 0usize;
    for p in &pairs {
        let (emitted, g) = policy_targets(p.source.len(), &p.target, policy)?;
        total += closed_form_length(p.source.len(), &emitted, &g, l_slot, roles);
    }
    Ok(total as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> Transformer<f64> {
        Transformer::init(ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            vocab_size: 16,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_corpus() -> ToyCorpus {
        ToyCorpusSpec {
            src_len_min: 3,
            src_len_max: 6,
            vocab_size: 16,
            size: 16,
            ..ToyCorpusSpec::default()
        }
        .build()
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            sample: SampleConfig::new(4, PolicySpec::wait_k(2)),
            optim: OptimConfig {
                steps,
                batch_size: 4,
                warmup: 5,
                lr: 1e-2,
                ..OptimConfig::default()
            },
        }
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let mut m = tiny_model();
        let before = m.clone();
        let r = train(&mut m, &tiny_corpus(), &cfg(0)).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let corpus = tiny_corpus();
        let mut a = tiny_model();
        let mut b = tiny_model();
        let ra = train(&mut a, &corpus, &cfg(60)).unwrap();
        let rb = train(&mut b, &corpus, &cfg(60)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let head: f64 = ra.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = ra.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let corpus = ToyCorpusSpec {
            vocab_size: 40,
            ..ToyCorpusSpec::default()
        }
        .build()
        .unwrap();
        assert!(train(&mut tiny_model(), &corpus, &cfg(1)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny_model();
        m.params.tensors[1].data[0] = f64::NAN;
        match train(&mut m, &tiny_corpus(), &cfg(3)) {
            Err(Error::Divergence { step: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn averages_agree_with_closed_form() {
        let corpus = ToyCorpusSpec::default().build().unwrap();
        let policy = PolicySpec::wait_k(3);
        for l in [1, 4, 8, 16, 32, 64, 128] {
            let a = avg_sequence_length(&corpus, l, RoleLens::default(), &policy).unwrap();
            let b = avg_closed_form_length(&corpus, l, RoleLens::default(), &policy).unwrap();
            assert_eq!(a, b, "L={l}");
        }
    }

    #[test]
    fn evaluation_runs_under_each_variant() {
        let m = tiny_model();
        let corpus = tiny_corpus();
        for v in Variant::ALL {
            let sc = SampleConfig::new(4, PolicySpec::wait_k(2)).variant(v);
            let acc = evaluate(&m, &corpus, 100..104, &inference_config(&sc, None)).unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}
