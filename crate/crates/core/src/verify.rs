//! Randomized and exhaustive property checks over the whole stack.
//!
//! Each check returns a [`Check`] with its trial count and the worst value
//! of its metric; [`run_suite`] runs them all.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{compare_traces, run_stream, uncached_replay, Decode, EngineConfig, Strategy, StreamSession};
use crate::error::{Error, Result};
use crate::layout::{layout_recompute, LayoutPlan, RoleLens};
use crate::masking::{build_policy_mask, visibility_oracle};
use crate::metrics::{cumulative_flops, FlopsModel};
use crate::model::{ForwardInput, ModelConfig, PosScheme, Transformer, Visibility};
use crate::policy::PolicySpec;
use crate::scalar::Scalar;
use crate::tokens::{special, Tag, TokenId};
use crate::trainer::{build_from_delays, build_sample, grad_visibility_check, policy_targets, SampleConfig};

/// Deliberate defects used to show that checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Run the equivalence check on NAIVE_REUSE streams instead of EXPOST.
    NaiveReuse,
    /// Flip one illegal bit in each training mask before the gradient check.
    MaskBit,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive-reuse" => Ok(Fault::NaiveReuse),
            "mask-bit" => Ok(Fault::MaskBit),
            _ => Err(Error::Invalid(format!(
                "unknown fault `{s}`; expected naive-reuse or mask-bit"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    pub metric: String,
    pub worst: f64,
    pub note: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} trials={:<6} {}={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.metric,
            self.worst
        )?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VerifyOptions {
    pub quick: bool,
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

pub fn run_suite(options: &VerifyOptions) -> Result<VerifyReport> {
    let n = |full: usize, quick: usize| if options.quick { quick } else { full };
    let s = options.seed;
    let checks = vec![
        replay_equivalence(n(100, 12), s, options.fault)?,
        position_invariance(n(200, 30), s)?,
        mask_oracle(n(10_000, 500), !options.quick, s)?,
        gradient_visibility(n(50, 5), s, options.fault)?,
        training_alignment(n(50, 8), s)?,
        flops_identities(n(100, 15), s)?,
        reuse_dilemma(n(1000, 50), s)?,
    ];
    Ok(VerifyReport { checks })
}

pub(crate) fn random_model<F: Scalar>(rng: &mut impl Rng, pos: PosScheme, vocab: usize) -> Result<Transformer<F>> {
    let heads = 2;
    let d_model = [8, 16][rng.random_range(0..2)];
    Transformer::init(ModelConfig {
        d_model,
        n_heads: heads,
        n_layers: rng.random_range(1..=2),
        d_ff: 2 * d_model,
        vocab_size: vocab,
        pos_scheme: pos,
        max_position: 8192,
        seed: rng.random(),
        ..ModelConfig::default()
    })
}

fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.random_range(special::FIRST_CONTENT..vocab as TokenId))
        .collect()
}

fn random_policy(rng: &mut impl Rng, max_k: usize, max_n: usize) -> PolicySpec {
    if rng.random_bool(0.5) {
        PolicySpec::wait_k(rng.random_range(1..=max_k))
    } else {
        PolicySpec::read_n(rng.random_range(1..=max_n)).with_write_cap(rng.random_range(2..=16))
    }
}

fn random_roles(rng: &mut impl Rng) -> RoleLens {
    RoleLens::new(
        rng.random_range(0..=2),
        rng.random_range(0..=2),
        rng.random_range(1..=2),
    )
}

/// One random EXPOST stream setup.
struct StreamCase {
    pos: PosScheme,
    source: Vec<TokenId>,
    config: EngineConfig,
}

const VOCAB: usize = 32;

fn stream_case(rng: &mut impl Rng, strategy: Option<Strategy>) -> StreamCase {
    let pos = if rng.random_bool(0.5) {
        PosScheme::Rotary
    } else {
        PosScheme::Alibi
    };
    let src_len = rng.random_range(1..=64);
    let source = random_tokens(rng, src_len, VOCAB);
    let l_slot = rng.random_range(1..=32);
    let strategy = strategy.unwrap_or(Strategy::ExPost { l_slot });
    let decode = if rng.random_bool(0.75) {
        let t_len = rng.random_range(1..=src_len + 8);
        Decode::Forced(random_tokens(rng, t_len, VOCAB))
    } else {
        Decode::Greedy
    };
    let config = EngineConfig::new(random_policy(rng, 8, 13), strategy)
        .roles(random_roles(rng))
        .decode(decode);
    StreamCase { pos, source, config }
}

/// Cached EXPOST logits against fresh uncached passes over the same layouts.
pub fn replay_equivalence(trials: usize, seed: u64, fault: Option<Fault>) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let strategy = (fault == Some(Fault::NaiveReuse)).then_some(Strategy::NaiveReuse);
    let mut worst_ratio = 0.0f64;
    let mut worst = [0.0f64; 2];
    let mut failures = 0;
    for trial in 0..trials {
        let case = stream_case(&mut rng, strategy);
        let (diff, tol, slot) = if trial % 2 == 0 {
            let model = random_model::<f32>(&mut rng, case.pos, VOCAB)?;
            let trace = run_stream(&model, &case.source, case.config)?;
            let replay = uncached_replay(&trace, &model)?;
            (compare_traces(&trace, &replay, 1e-5), 1e-5, 0)
        } else {
            let model = random_model::<f64>(&mut rng, case.pos, VOCAB)?;
            let trace = run_stream(&model, &case.source, case.config)?;
            let replay = uncached_replay(&trace, &model)?;
            (compare_traces(&trace, &replay, 1e-10), 1e-10, 1)
        };
        let d = if diff.structural_mismatch {
            f64::INFINITY
        } else {
            diff.max_logit_diff
        };
        worst[slot] = worst[slot].max(d);
        worst_ratio = worst_ratio.max(d / tol);
        if d > tol {
            failures += 1;
        }
    }
    Ok(Check {
        name: "replay-equivalence".into(),
        passed: failures == 0,
        trials,
        metric: "max|dlogit|/tol".into(),
        worst: worst_ratio,
        note: format!(
            "f32 worst {:.2e}, f64 worst {:.2e}, {failures} failing",
            worst[0], worst[1]
        ),
    })
}

/// Slot start positions and target positions derived from the delays alone.
pub fn expected_target_positions(g: &[usize], l_slot: usize, roles: RoleLens) -> Vec<usize> {
    let slot_of = |x: usize| x.saturating_sub(1) / l_slot;
    let mut out = Vec::with_capacity(g.len());
    let mut slot = 0;
    let mut start = roles.prompt + roles.user;
    let mut last_end: Option<usize> = None;
    let mut rank = 0;
    for &gj in g {
        let s = slot_of(gj);
        while slot < s {
            let slot_end = start + l_slot;
            let free = last_end.map_or(slot_end, |e| (e + 1).max(slot_end));
            start = free + roles.user;
            slot += 1;
            rank = 0;
        }
        let pos = start + l_slot + roles.assistant + rank;
        out.push(pos);
        last_end = Some(pos);
        rank += 1;
    }
    out
}

/// Positions in the cache never move across READs, and every target sits
/// where `slot start + L_slot` (plus its role block and rank) puts it.
pub fn position_invariance(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
    let model = random_model::<f64>(&mut rng, PosScheme::Rotary, VOCAB)?;
    let mut failures = 0;
    let mut reads = 0;
    let mut exhaustive = 0;
    let mut cases: Vec<(Vec<TokenId>, EngineConfig)> = Vec::new();
    for src_len in 1..=6 {
        for l_slot in 1..=4 {
            for k in 1..=3 {
                let source = random_tokens(&mut rng, src_len, VOCAB);
                let script = random_tokens(&mut rng, src_len, VOCAB);
                cases.push((
                    source,
                    EngineConfig::new(PolicySpec::wait_k(k), Strategy::ExPost { l_slot })
                        .decode(Decode::Forced(script))
                        .record_replay(false),
                ));
                exhaustive += 1;
            }
        }
    }
    for _ in 0..trials {
        let c = stream_case(&mut rng, None);
        cases.push((c.source, c.config.record_replay(false)));
    }
    for (source, config) in &cases {
        let Strategy::ExPost { l_slot } = config.strategy else {
            unreachable!()
        };
        let roles = config.roles;
        let mut session = StreamSession::new(&model, source, config.clone())?;
        let mut before: Vec<usize> = Vec::new();
        let mut ok = true;
        while !session.is_done() {
            let Some(step) = session.step()? else { break };
            let is_read = step.kind == crate::engine::StepKind::Read;
            let now = session.cache().positions().to_vec();
            if is_read {
                reads += 1;
                ok &= now.len() >= before.len() && now[..before.len()] == before[..];
            }
            before = now;
        }
        let trace = session.into_trace();
        let cache_targets: Vec<usize> = trace
            .steps
            .iter()
            .flat_map(|s| s.positions.iter().zip(&s.tags))
            .filter(|(_, t)| **t == Tag::Target)
            .map(|(p, _)| *p)
            .collect();
        let expected = expected_target_positions(&trace.delays, l_slot, roles);
        ok &= cache_targets[..] == expected[..cache_targets.len().min(expected.len())];
        ok &= cache_targets.len() + 1 == trace.output.len() || trace.capped;
        if !ok {
            failures += 1;
        }
    }
    Ok(Check {
        name: "position-invariance".into(),
        passed: failures == 0,
        trials: cases.len(),
        metric: "failing-streams".into(),
        worst: failures as f64,
        note: format!("{exhaustive} exhaustive small cases, {reads} READ events"),
    })
}

fn mismatches(layout: &LayoutPlan, g: &[usize]) -> Result<usize> {
    let mask = build_policy_mask(layout, g)?;
    let n = layout.len();
    let mut bad = 0;
    for r in 0..n {
        for c in 0..n {
            if mask.get(r, c) != visibility_oracle(layout, g, r, c)? {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

fn random_layout(rng: &mut impl Rng, max_src: usize) -> Result<(LayoutPlan, Vec<usize>)> {
    let src_len = rng.random_range(1..=max_src);
    let t_len = rng.random_range(1..=max_src + 4);
    let source = random_tokens(rng, src_len, VOCAB);
    let target = random_tokens(rng, t_len, VOCAB);
    let policy = random_policy(rng, 6, 8);
    let (emitted, g) = policy_targets(src_len, &target, &policy)?;
    let layout = if rng.random_bool(0.75) {
        build_from_delays(
            &source,
            &emitted,
            &g,
            rng.random_range(1..=12),
            random_roles(rng),
            crate::trainer::Variant::Full,
        )?
        .layout
    } else {
        layout_recompute(&source, &emitted[..emitted.len() - 1], random_roles(rng))
    };
    Ok((layout, g))
}

/// Mask builder against the brute-force visibility oracle.
pub fn mask_oracle(random_cases: usize, exhaustive: bool, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let mut bad_cases = 0;
    let mut cases = 0;
    let mut small = 0;
    if exhaustive {
        for src_len in 1..=10 {
            for t_len in 1..=10 {
                let source: Vec<TokenId> = (0..src_len as TokenId).map(|i| 6 + i).collect();
                let target: Vec<TokenId> = (0..t_len as TokenId).map(|i| 20 + i).collect();
                for k in 1..=5 {
                    let (emitted, g) = policy_targets(src_len, &target, &PolicySpec::wait_k(k))?;
                    for l_slot in 1..=10 {
                        for roles in [RoleLens::default(), RoleLens::new(1, 1, 1), RoleLens::new(0, 0, 1)] {
                            let layout =
                                build_from_delays(&source, &emitted, &g, l_slot, roles, crate::trainer::Variant::Full)?
                                    .layout;
                            if layout.len() > 24 {
                                continue;
                            }
                            small += 1;
                            cases += 1;
                            if mismatches(&layout, &g)? > 0 {
                                bad_cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    for _ in 0..random_cases {
        let (layout, g) = random_layout(&mut rng, 24)?;
        cases += 1;
        if mismatches(&layout, &g)? > 0 {
            bad_cases += 1;
        }
    }
    Ok(Check {
        name: "mask-oracle".into(),
        passed: bad_cases == 0,
        trials: cases,
        metric: "mismatching-layouts".into(),
        worst: bad_cases as f64,
        note: format!("{small} exhaustive layouts of <= 24 entries"),
    })
}

/// Hidden sources get exactly zero gradient and zero finite-difference slope.
pub fn gradient_visibility(samples: usize, seed: u64, fault: Option<Fault>) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
    let model = Transformer::<f64>::init(ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        vocab_size: VOCAB,
        max_position: 8192,
        seed: rng.random(),
        ..ModelConfig::default()
    })?;
    let mut failures = 0;
    let mut pairs = 0;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let src_len = rng.random_range(2..=20);
        let source = random_tokens(&mut rng, src_len, VOCAB);
        let target_len = rng.random_range(1..=src_len + 4);
        let target = random_tokens(&mut rng, target_len, VOCAB);
        let l_slot = rng.random_range(1..=16);
        let config = SampleConfig::new(l_slot, random_policy(&mut rng, 5, 6)).roles(random_roles(&mut rng));
        let mut sample = build_sample(&source, &target, &config)?;
        if fault == Some(Fault::MaskBit) {
            inject_illegal_bit(&mut sample);
        }
        let report = grad_visibility_check(&model, &sample, Some(1e-3))?;
        pairs += report.constrained_pairs;
        worst = worst.max(report.max_abs_grad).max(report.max_fd.unwrap_or(0.0));
        if !report.passed() {
            failures += 1;
        }
    }
    Ok(Check {
        name: "gradient-visibility".into(),
        passed: failures == 0,
        trials: samples,
        metric: "max|grad|,|fd|".into(),
        worst,
        note: format!("{pairs} constrained pairs, {failures} failing samples"),
    })
}

/// Lets one prediction row see a source its policy has not read yet.
fn inject_illegal_bit(sample: &mut crate::trainer::TrainingSample) {
    let sources: Vec<usize> = (0..sample.layout.len())
        .filter(|&r| sample.layout.entries[r].tag == Tag::Source)
        .collect();
    for (j, row) in sample.prediction_rows().into_iter().enumerate() {
        if let Some(&col) = sources.get(sample.g[j]) {
            if col < row {
                sample.mask.set(row, col, true);
                return;
            }
        }
    }
}

/// Training-mask logits at each prediction row against the streaming
/// engine's logits at the matching WRITE.
pub fn training_alignment(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let pos = if rng.random_bool(0.5) {
            PosScheme::Rotary
        } else {
            PosScheme::Alibi
        };
        let model = random_model::<f32>(&mut rng, pos, VOCAB)?;
        let src_len = rng.random_range(1..=30);
        let source = random_tokens(&mut rng, src_len, VOCAB);
        let target_len = rng.random_range(1..=30);
        let target = random_tokens(&mut rng, target_len, VOCAB);
        let l_slot = rng.random_range(1..=16);
        let config = SampleConfig::new(l_slot, random_policy(&mut rng, 6, 8)).roles(random_roles(&mut rng));
        let (d, ok) = alignment_case(&model, &source, &target, &config)?;
        worst = worst.max(d);
        if !ok || d > 1e-5 {
            failures += 1;
        }
    }
    Ok(Check {
        name: "training-alignment".into(),
        passed: failures == 0,
        trials: cases,
        metric: "max|dlogit|".into(),
        worst,
        note: format!("{failures} failing"),
    })
}

/// Largest logit difference between a training pass and the engine for one
/// pair, and whether the engine followed the same emission schedule.
pub fn alignment_case<F: Scalar>(
    model: &Transformer<F>,
    source: &[TokenId],
    target: &[TokenId],
    config: &SampleConfig,
) -> Result<(f64, bool)> {
    let sample = build_sample(source, target, config)?;
    let tokens = sample.layout.tokens();
    let positions = sample.layout.positions();
    let tags = sample.layout.tags();
    let out =
        model.forward(&ForwardInput::new(&tokens, &positions, &tags).visibility(Visibility::Mask(&sample.mask)))?;
    let script = sample.emitted[..sample.emitted.len() - 1].to_vec();
    let engine = EngineConfig::new(config.policy, Strategy::ExPost { l_slot: config.l_slot })
        .roles(config.roles)
        .decode(Decode::Forced(script))
        .write_cap(sample.emitted.len() + 8)
        .record_replay(false);
    let trace = run_stream(model, source, engine)?;
    let same_schedule = trace.output == sample.emitted && trace.delays == sample.g;
    let mut worst = 0.0f64;
    for (step, row) in trace.write_steps().zip(sample.prediction_rows()) {
        for (a, b) in step.logits.iter().zip(out.row(row)) {
            let d = (a - b.to_f64().unwrap_or(f64::NAN)).abs();
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    Ok((worst, same_schedule))
}

/// Instrumented multiply-accumulates equal the closed form, and cumulative
/// trace FLOPs equal the sum over recorded forward calls.
pub fn flops_identities(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let model = random_model::<f64>(&mut rng, PosScheme::Rotary, VOCAB)?;
        let fm = FlopsModel::new(&model.config);
        let c = rng.random_range(0..40);
        let m = rng.random_range(1..20);
        let toks = random_tokens(&mut rng, c + m, VOCAB);
        let pos: Vec<usize> = (0..c + m).collect();
        let tags = vec![Tag::Source; c + m];
        let mut cache = crate::kv_cache::KvCache::for_model(&model);
        if c > 0 {
            let pre = model.forward(&ForwardInput::new(&toks[..c], &pos[..c], &tags[..c]))?;
            cache.append(pre.delta)?;
        }
        let out = model.forward(&ForwardInput::new(&toks[c..], &pos[c..], &tags[c..]).cache(&cache))?;
        let rel = (out.macs as f64 - fm.macs_forward(c, m)).abs() / fm.macs_forward(c, m);
        worst = worst.max(rel);

        let strategy = match rng.random_range(0..5) {
            0 => Strategy::ExPost {
                l_slot: rng.random_range(1..=16),
            },
            1 => Strategy::recompute(),
            2 => Strategy::NaiveReuse,
            3 => Strategy::Conversational,
            _ => Strategy::Grouped,
        };
        let src_len = rng.random_range(1..=24);
        let src = random_tokens(&mut rng, src_len, VOCAB);
        let script = random_tokens(&mut rng, src.len(), VOCAB);
        let trace = run_stream(
            &model,
            &src,
            EngineConfig::new(random_policy(&mut rng, 5, 6), strategy)
                .decode(Decode::Forced(script))
                .record_replay(false),
        )?;
        let summed: f64 = trace
            .steps
            .iter()
            .flat_map(|s| s.forwards.iter())
            .map(|&(c, m)| fm.flops_forward(c, m))
            .sum();
        let total = cumulative_flops(&trace);
        worst = worst.max((total - summed).abs() / summed.max(1.0));
    }
    Ok(Check {
        name: "flops-identities".into(),
        passed: worst == 0.0,
        trials,
        metric: "max-rel-error".into(),
        worst,
        note: String::new(),
    })
}

/// Forced-decoding NAIVE_REUSE and RECOMPUTE streams disagree once a source
/// token lands after a target.
pub fn reuse_dilemma(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let mut diverged = 0;
    let mut smallest = f64::INFINITY;
    for _ in 0..trials {
        let pos = if rng.random_bool(0.5) {
            PosScheme::Rotary
        } else {
            PosScheme::Alibi
        };
        let model = random_model::<f64>(&mut rng, pos, VOCAB)?;
        let k = rng.random_range(1..=4);
        let src_len = rng.random_range(k + 2..=k + 16);
        let src = random_tokens(&mut rng, src_len, VOCAB);
        let script = random_tokens(&mut rng, src.len(), VOCAB);
        let run = |strategy| {
            run_stream(
                &model,
                &src,
                EngineConfig::new(PolicySpec::wait_k(k), strategy)
                    .decode(Decode::Forced(script.clone()))
                    .record_replay(false),
            )
        };
        let naive = run(Strategy::NaiveReuse)?;
        let recompute = run(Strategy::recompute())?;
        let report = compare_traces(&naive, &recompute, 1e-3);
        smallest = smallest.min(report.max_logit_diff);
        if report.max_logit_diff > 1e-3 {
            diverged += 1;
        }
    }
    let rate = diverged as f64 / trials.max(1) as f64;
    Ok(Check {
        name: "reuse-dilemma".into(),
        passed: rate >= 0.99,
        trials,
        metric: "divergence-rate".into(),
        worst: rate,
        note: format!("smallest max|dlogit| {smallest:.2e}"),
    })
}
