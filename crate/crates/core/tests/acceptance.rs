//! Acceptance criteria, one line each.
//!
//! Run with `cargo test -p slotstream --test acceptance`. Lines are written
//! straight to stdout so they show up without `--nocapture`.

use std::io::Write;
use std::time::{Duration, Instant};

use slotstream::layout::{AllocationState, RoleLens};
use slotstream::metrics::FlopsModel;
use slotstream::trainer::{
    avg_closed_form_length, avg_sequence_length, evaluate, inference_config, policy_targets, train, OptimConfig,
    SampleConfig, ToyCorpus, ToyCorpusSpec, TrainConfig, Variant,
};
use slotstream::verify;
use slotstream::{run_stream, Decode, EngineConfig, ModelConfig, PolicySpec, Strategy, Transformer};

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn report(o: &Outcome) {
    let line = format!(
        "criterion {:>2} {} {:<34} [{:>6.1}s] {}\n",
        o.id,
        if o.passed { "PASS" } else { "FAIL" },
        o.title,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn timed(id: usize, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = f();
    let o = Outcome {
        id,
        title,
        passed,
        detail,
        elapsed: t.elapsed(),
    };
    report(&o);
    o
}

fn c1() -> (bool, String) {
    let t = Instant::now();
    let c = verify::replay_equivalence(100, 2024, None).unwrap();
    let fast = t.elapsed() < Duration::from_secs(120);
    (c.passed && fast, format!("{} streams, {}", c.trials, c.note))
}

/// Target positions predicted from the delays alone.
fn eq1_positions(g: &[usize], l: usize, roles: RoleLens) -> Vec<usize> {
    let mut out = Vec::new();
    let mut slot = 0;
    let mut start = roles.prompt + roles.user;
    let mut last: Option<usize> = None;
    let mut rank = 0;
    for &gj in g {
        let want = gj.saturating_sub(1) / l;
        while slot < want {
            let end = start + l;
            start = last.map_or(end, |e| end.max(e + 1)) + roles.user;
            slot += 1;
            rank = 0;
        }
        let p = start + l + roles.assistant + rank;
        out.push(p);
        last = Some(p);
        rank += 1;
    }
    out
}

fn c2() -> (bool, String) {
    let mut sequences = 0usize;
    let mut bad = 0usize;
    for l in 1..=4 {
        for roles in [RoleLens::default(), RoleLens::new(1, 2, 2), RoleLens::new(0, 0, 1)] {
            for len in 1..=12u32 {
                for bits in 0..(1u32 << len) {
                    sequences += 1;
                    let mut alloc = AllocationState::new(l, roles).unwrap();
                    let mut g = Vec::new();
                    let mut targets = Vec::new();
                    let mut seen = std::collections::BTreeSet::new();
                    let mut ok = true;
                    let mut last_slot = None;
                    for e in 0..len {
                        let placed = if bits >> e & 1 == 1 {
                            let p = alloc.place_source_detailed(1).unwrap();
                            let slot = alloc.current_slot();
                            ok &= p.last().unwrap().position == slot.start_pos + slot.filled - 1;
                            p
                        } else {
                            let p = alloc.place_target_detailed(1).unwrap();
                            let pos = p.last().unwrap().position;
                            let slot = alloc.current_slot();
                            if last_slot != Some(slot.index) {
                                ok &= pos == slot.start_pos + l + roles.assistant;
                                last_slot = Some(slot.index);
                            }
                            g.push(alloc.slots.iter().map(|s| s.filled).sum::<usize>());
                            targets.push(pos);
                            p
                        };
                        for q in placed {
                            ok &= seen.insert(q.position);
                        }
                    }
                    ok &= targets == eq1_positions(&g, l, roles);
                    if !ok {
                        bad += 1;
                    }
                }
            }
        }
    }
    let c = verify::position_invariance(200, 2024).unwrap();
    (
        bad == 0 && c.passed,
        format!(
            "{sequences} exhaustive event sequences, {bad} bad; engine {} streams, {}",
            c.trials, c.note
        ),
    )
}

fn c3() -> (bool, String) {
    let c = verify::reuse_dilemma(1000, 2024).unwrap();
    (
        c.passed,
        format!("divergence rate {:.3} over {} trials, {}", c.worst, c.trials, c.note),
    )
}

fn c4() -> (bool, String) {
    let t = Instant::now();
    let c = verify::mask_oracle(10_000, true, 2024).unwrap();
    let fast = t.elapsed() < Duration::from_secs(60);
    (
        c.passed && fast,
        format!("{} layouts, {} mismatching, {}", c.trials, c.worst, c.note),
    )
}

fn c5() -> (bool, String) {
    let c = verify::gradient_visibility(50, 2024, None).unwrap();
    (
        c.passed && c.worst == 0.0,
        format!("{} samples, {}, worst {:.1e}", c.trials, c.note, c.worst),
    )
}

fn c6() -> (bool, String) {
    let c = verify::training_alignment(50, 2024).unwrap();
    (c.passed, format!("{} cases, max|dlogit| {:.2e}", c.trials, c.worst))
}

fn desk_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        vocab_size: 64,
        max_position: 4096,
        seed,
        ..ModelConfig::default()
    }
}

fn forced_flops(
    model: &Transformer<f32>,
    source: &[u32],
    target: &[u32],
    policy: PolicySpec,
    strategy: Strategy,
) -> f64 {
    let (script, _) = policy_targets(source.len(), target, &policy).unwrap();
    let cfg = EngineConfig::new(policy, strategy)
        .decode(Decode::Forced(script[..script.len() - 1].to_vec()))
        .record_replay(false);
    let trace = run_stream(model, source, cfg).unwrap();
    FlopsModel::new(&model.config).trace_flops(&trace)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn c7() -> (bool, String) {
    let t = Instant::now();
    let model = Transformer::<f32>::init(desk_config(7)).unwrap();
    let corpus = ToyCorpusSpec {
        size: 200,
        seed: 7,
        ..ToyCorpusSpec::default()
    }
    .build()
    .unwrap();
    let pairs = corpus.training_pairs();
    let strategies = [
        Strategy::ExPost { l_slot: 16 },
        Strategy::Conversational,
        Strategy::recompute(),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for policy in [PolicySpec::wait_k(3), PolicySpec::read_n(5)] {
        let med: Vec<f64> = strategies
            .iter()
            .map(|&s| {
                median(
                    pairs
                        .iter()
                        .map(|p| forced_flops(&model, &p.source, &p.target, policy, s))
                        .collect(),
                )
            })
            .collect();
        ok &= med[0] < med[1] && med[1] < med[2];
        let lens = [16usize, 32, 64, 128, 256];
        let xs: Vec<f64> = lens.iter().map(|&n| (n as f64).ln()).collect();
        let exps: Vec<f64> = [strategies[0], strategies[2]]
            .iter()
            .map(|&s| {
                let ys: Vec<f64> = lens
                    .iter()
                    .map(|&n| {
                        let p = corpus.pair(1_000_000 + n);
                        let src: Vec<u32> = (0..n).map(|i| p.source[i % p.source.len()]).collect();
                        let tgt: Vec<u32> = src.iter().map(|&x| corpus.map(x)).collect();
                        forced_flops(&model, &src, &tgt, policy, s).ln()
                    })
                    .collect();
                slope(&xs, &ys)
            })
            .collect();
        ok &= exps[0] <= 1.3 && exps[1] >= 1.8;
        parts.push(format!(
            "{policy}: median GFLOPs expost {:.4} < conv {:.4} < recompute {:.4}, exponent expost {:.2} recompute {:.2}",
            med[0] / 1e9,
            med[1] / 1e9,
            med[2] / 1e9,
            exps[0],
            exps[1]
        ));
    }
    ok &= t.elapsed() < Duration::from_secs(300);
    (ok, parts.join("; "))
}

fn c8() -> (bool, String) {
    let corpus = ToyCorpusSpec::default().build().unwrap();
    let policy = PolicySpec::wait_k(3);
    let grid = [4, 8, 16, 32, 64, 128];
    let mut lens = Vec::new();
    let mut exact = true;
    for l in grid {
        let a = avg_sequence_length(&corpus, l, RoleLens::default(), &policy).unwrap();
        let b = avg_closed_form_length(&corpus, l, RoleLens::default(), &policy).unwrap();
        exact &= a == b;
        lens.push(a);
    }
    let (argmin, _) = lens.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let strict = lens.iter().enumerate().all(|(i, &v)| i == argmin || v > lens[argmin]);
    let interior = argmin != 0 && argmin != grid.len() - 1;
    let shown: Vec<String> = grid.iter().zip(&lens).map(|(l, v)| format!("{l}:{v:.2}")).collect();
    (
        exact && strict && interior,
        format!(
            "avg len {} (min at L={}), closed form exact: {exact}",
            shown.join(" "),
            grid[argmin]
        ),
    )
}

const EVAL: std::ops::Range<usize> = 100_000..100_200;

fn trained(corpus: &ToyCorpus, variant: Variant) -> (Transformer<f32>, SampleConfig) {
    let sample = SampleConfig::new(16, PolicySpec::wait_k(3)).variant(variant);
    let mut model = Transformer::<f32>::init(desk_config(1)).unwrap();
    let config = TrainConfig {
        sample,
        optim: OptimConfig {
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            warmup: 100,
            ..OptimConfig::default()
        },
    };
    train(&mut model, corpus, &config).unwrap();
    (model, sample)
}

fn c9_c10() -> ((bool, String), (bool, String)) {
    let corpus = ToyCorpusSpec::default().build().unwrap();
    let mut acc = Vec::new();
    let mut full = None;
    for v in Variant::ALL {
        let (model, sample) = trained(&corpus, v);
        acc.push(evaluate(&model, &corpus, EVAL, &inference_config(&sample, None)).unwrap());
        if v == Variant::Full {
            full = Some((model, sample));
        }
    }
    let margin = 0.05;
    let c9 = (
        acc[0] >= acc[1] + margin && acc[0] >= acc[2] + margin,
        format!(
            "token accuracy full {:.3}, w/o masking {:.3}, w/o slot {:.3}",
            acc[0], acc[1], acc[2]
        ),
    );

    let (model, sample) = full.expect("full model");
    let mut rows = Vec::new();
    let mut errors = 0;
    for l in [4, 8, 16, 32, 64] {
        match evaluate(&model, &corpus, EVAL, &inference_config(&sample, Some(l))) {
            Ok(a) => rows.push((l, a)),
            Err(_) => errors += 1,
        }
    }
    let matched = rows.iter().find(|r| r.0 == 16).map_or(f64::NAN, |r| r.1);
    let best_other = rows
        .iter()
        .filter(|r| r.0 != 16)
        .map(|r| r.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = rows.iter().map(|(l, a)| format!("{l}:{a:.3}")).collect();
    let c10 = (
        errors == 0 && matched >= best_other,
        format!("train L=16, infer {} ({errors} errors)", shown.join(" ")),
    );
    (c9, c10)
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![
        timed(1, "zero-recomputation correctness", c1),
        timed(2, "target-position invariance", c2),
        timed(3, "reuse dilemma", c3),
        timed(4, "mask oracle equivalence", c4),
        timed(5, "gradient visibility", c5),
        timed(6, "training/inference alignment", c6),
        timed(7, "flops hierarchy", c7),
        timed(8, "slot-length sequence curve", c8),
    ];
    let t = Instant::now();
    let (c9, c10) = c9_c10();
    let elapsed = t.elapsed();
    let c9_fast = elapsed < Duration::from_secs(15 * 60);
    for (id, title, (passed, detail)) in [
        (9, "policy-consistent training efficacy", (c9.0 && c9_fast, c9.1)),
        (10, "slot-mismatch mechanics", c10),
    ] {
        let o = Outcome {
            id,
            title,
            passed,
            detail,
            elapsed,
        };
        report(&o);
        outcomes.push(o);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
