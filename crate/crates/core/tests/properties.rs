//! Cross-module invariants over random inputs.

use proptest::prelude::*;

use slotstream::model::checkpoint;
use slotstream::trainer::{build_training_sequence, closed_form_length, policy_targets, segment_source};
use slotstream::verify::expected_target_positions;
use slotstream::{
    build_causal_mask, build_policy_mask, compare_traces, run_stream, uncached_replay, visibility_oracle,
    AllocationState, Decode, EngineConfig, ModelConfig, PolicyKind, PolicySpec, RoleLens, StreamSession, StreamTrace,
    Tag, TokenId, Transformer,
};

fn policy() -> impl Strategy<Value = PolicySpec> {
    prop_oneof![
        (1usize..6).prop_map(PolicySpec::wait_k),
        (1usize..6, 1usize..6).prop_map(|(n, cap)| PolicySpec::read_n(n).with_write_cap(cap)),
    ]
}

fn roles() -> impl Strategy<Value = RoleLens> {
    (0usize..3, 0usize..3, 1usize..3).prop_map(|(p, u, a)| RoleLens::new(p, u, a))
}

fn content(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<TokenId>> {
    proptest::collection::vec(6u32..30, len)
}

fn small_model(seed: u64) -> Transformer<f64> {
    Transformer::init(ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        vocab_size: 32,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn allocator_targets_follow_their_slot(
        l in 1usize..6,
        roles in roles(),
        events in proptest::collection::vec(any::<bool>(), 1..40),
    ) {
        let mut alloc = AllocationState::new(l, roles).unwrap();
        let mut g = Vec::new();
        let mut targets = Vec::new();
        let mut all = std::collections::BTreeSet::new();
        for read in events {
            let placed = if read {
                alloc.place_source_detailed(1).unwrap()
            } else {
                let p = alloc.place_target_detailed(1).unwrap();
                g.push(alloc.slots.iter().map(|s| s.filled).sum::<usize>());
                targets.push(p.last().unwrap().position);
                p
            };
            for p in placed {
                prop_assert!(all.insert(p.position), "position {} handed out twice", p.position);
            }
        }
        prop_assert_eq!(targets, expected_target_positions(&g, l, roles));
    }

    #[test]
    fn training_masks_match_the_oracle(
        source in content(1..12),
        target in content(1..14),
        policy in policy(),
        l in 1usize..8,
        roles in roles(),
    ) {
        let sample = build_training_sequence(&source, &target, l, &policy, roles).unwrap();
        prop_assert!(sample.mask.within_causal_envelope());
        let mask = build_policy_mask(&sample.layout, &sample.g).unwrap();
        prop_assert_eq!(&mask, &sample.mask);
        let n = sample.layout.len();
        for r in 0..n {
            for c in 0..n {
                prop_assert_eq!(mask.get(r, c), visibility_oracle(&sample.layout, &sample.g, r, c).unwrap());
            }
        }
        let causal = build_causal_mask(&sample.layout);
        prop_assert!(mask.count_visible() <= causal.count_visible());
    }

    #[test]
    fn closed_form_counts_every_entry(
        source in content(1..30),
        target in content(1..30),
        policy in policy(),
        l in 1usize..40,
        roles in roles(),
    ) {
        let sample = build_training_sequence(&source, &target, l, &policy, roles).unwrap();
        let (emitted, g) = policy_targets(source.len(), &target, &policy).unwrap();
        prop_assert_eq!(sample.layout.len(), closed_form_length(source.len(), &emitted, &g, l, roles));
        sample.layout.validate().unwrap();
        let slots = segment_source(&source, l).unwrap();
        prop_assert_eq!(slots.concat(), source);
        prop_assert_eq!(sample.layout.count(Tag::Source), slots.iter().map(Vec::len).sum::<usize>());
    }

    #[test]
    fn delays_are_monotone_and_bounded(src_len in 1usize..40, target in content(1..40), policy in policy()) {
        let (emitted, g) = policy_targets(src_len, &target, &policy).unwrap();
        prop_assert_eq!(emitted.len(), g.len());
        prop_assert!(g.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(g.iter().all(|&x| (1..=src_len).contains(&x)));
        if policy.kind == PolicyKind::ReadN {
            prop_assert_eq!(*g.last().unwrap(), src_len);
        } else {
            prop_assert_eq!(*g.last().unwrap(), (policy.param + g.len() - 1).min(src_len));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expost_cache_is_append_only_and_replays_exactly(
        source in content(1..10),
        script in content(1..10),
        policy in policy(),
        l in 1usize..6,
        roles in roles(),
        seed in 0u64..1000,
    ) {
        let model = small_model(seed);
        let cfg = EngineConfig::new(policy, slotstream::Strategy::ExPost { l_slot: l })
            .roles(roles)
            .decode(Decode::Forced(script));
        let mut session = StreamSession::new(&model, &source, cfg.clone()).unwrap();
        let mut before: Vec<usize> = Vec::new();
        while let Some(step) = session.step().unwrap() {
            prop_assert_eq!(step.recomputed, 0);
            let now = session.cache().positions().to_vec();
            prop_assert!(now.starts_with(&before));
            before = now;
        }
        let trace = session.into_trace();
        let replay = uncached_replay(&trace, &model).unwrap();
        let report = compare_traces(&trace, &replay, 1e-10);
        prop_assert!(!report.structural_mismatch);
        prop_assert!(report.max_logit_diff <= 1e-10, "{}", report.max_logit_diff);
    }

    #[test]
    fn traces_survive_jsonl(source in content(1..8), policy in policy(), seed in 0u64..100) {
        let model = small_model(seed);
        for name in slotstream::Strategy::NAMES {
            let strategy = slotstream::Strategy::parse(name, 3).unwrap();
            let trace = run_stream(&model, &source, EngineConfig::new(policy, strategy).record_replay(false)).unwrap();
            let text = trace.to_jsonl().unwrap();
            prop_assert_eq!(StreamTrace::from_jsonl(&text).unwrap(), trace);
        }
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    for seed in 0..4 {
        let m = small_model(seed);
        let bytes = checkpoint::to_bytes(&m).unwrap();
        let back: Transformer<f64> = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    }
    let dir = tempfile_dir();
    let path = dir.join("m.bin");
    let m = Transformer::<f32>::init(ModelConfig::default()).unwrap();
    checkpoint::save(&m, &path).unwrap();
    assert_eq!(checkpoint::load::<f32>(&path).unwrap(), m);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("slotstream-props-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
