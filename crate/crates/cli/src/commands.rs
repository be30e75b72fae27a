use std::fmt::Write as _;

use anyhow::{anyhow, Context};
use serde::Serialize;
use slotstream::metrics::MetricsRow;
use slotstream::model::checkpoint;
use slotstream::trainer::{self, avg_sequence_length, build_sample, inference_config, ToyCorpus, TrainConfig};
use slotstream::verify::{self, Fault, VerifyOptions};
use slotstream::{
    laal, run_stream, token_accuracy, Decode, EngineConfig, FlopsModel, PolicySpec, StepKind, Strategy, StreamSession,
    Tag, TokenId, Transformer,
};

use crate::config::RunConfig;
use crate::output::RunDir;
use crate::{Common, Failure};

type Outcome = Result<(), Failure>;

fn load_model(cfg: &RunConfig) -> Result<Transformer<f32>, Failure> {
    Ok(match &cfg.checkpoint {
        Some(path) => checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Transformer::init(cfg.model.clone())?,
    })
}

fn corpus(cfg: &RunConfig) -> Result<ToyCorpus, Failure> {
    Ok(cfg.corpus.build()?)
}

fn eval_range(cfg: &RunConfig) -> std::ops::Range<usize> {
    cfg.eval_start..cfg.eval_start + cfg.eval_pairs
}

pub fn verify(cfg: &RunConfig, common: &Common, fault: Option<Fault>) -> Outcome {
    let report = verify::run_suite(&VerifyOptions {
        quick: common.quick,
        seed: cfg.seed,
        fault,
    })?;
    print!("{report}");
    let dir = RunDir::create(common.out.as_deref(), "verify")?;
    #[derive(Serialize)]
    struct Row<'a> {
        property: &'a str,
        passed: bool,
        trials: usize,
        metric: &'a str,
        worst: f64,
    }
    let rows: Vec<Row> = report
        .checks
        .iter()
        .map(|c| Row {
            property: &c.name,
            passed: c.passed,
            trials: c.trials,
            metric: &c.metric,
            worst: c.worst,
        })
        .collect();
    dir.write_csv(
        "verify.csv",
        &["property", "passed", "trials", "metric", "worst"],
        &rows,
    )?;
    dir.write_manifest(
        "verify",
        cfg,
        serde_json::json!({ "quick": common.quick, "fault": fault.map(|f| format!("{f:?}")), "passed": report.passed() }),
    )?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Property(format!("failed: {}", failed.join(", "))))
    }
}

fn compare_row(
    model: &Transformer<f32>,
    corpus: &ToyCorpus,
    cfg: &RunConfig,
    strategy: Strategy,
    policy: PolicySpec,
) -> Result<MetricsRow, Failure> {
    let flops = FlopsModel::new(&model.config);
    let engine = EngineConfig::new(policy, strategy)
        .roles(cfg.roles)
        .record_replay(false);
    let pairs = corpus.pairs(eval_range(cfg));
    let (mut acc, mut lag, mut gflops) = (0.0, 0.0, 0.0);
    for p in &pairs {
        let trace = run_stream(model, &p.source, engine.clone())?;
        let hyp = trace.content_output();
        acc += token_accuracy(&hyp, &p.target);
        lag += if hyp.is_empty() {
            p.source.len() as f64
        } else {
            laal(&trace.content_delays(), p.source.len(), hyp.len(), p.target.len())?
        };
        gflops += flops.trace_flops(&trace) / 1e9;
    }
    let n = pairs.len() as f64;
    Ok(MetricsRow {
        strategy: strategy.to_string(),
        policy: policy.label().into(),
        k_or_n: policy.param,
        laal: lag / n,
        cum_gflops: gflops / n,
        token_accuracy: acc / n,
    })
}

pub fn compare(cfg: &RunConfig, common: &Common) -> Outcome {
    let model = load_model(cfg)?;
    let corpus = corpus(cfg)?;
    let mut rows = Vec::new();
    for strategy in cfg.strategies()? {
        for policy in cfg.compare_policies()? {
            let row = compare_row(&model, &corpus, cfg, strategy, policy)?;
            println!(
                "{:<18} {:<10} acc {:.3}  laal {:>6.2}  gflops {:.4}",
                row.strategy,
                policy.to_string(),
                row.token_accuracy,
                row.laal,
                row.cum_gflops
            );
            rows.push(row);
        }
    }
    let dir = RunDir::create(common.out.as_deref(), "compare")?;
    let header = ["strategy", "policy", "k_or_n", "laal", "cum_gflops", "token_accuracy"];
    dir.write_csv("compare.csv", &header, &rows)?;
    dir.write_manifest("compare", cfg, serde_json::json!({ "rows": rows.len() }))?;
    Ok(())
}

pub fn slot_sweep(cfg: &RunConfig, common: &Common, train_each: bool) -> Outcome {
    let corpus = corpus(cfg)?;
    let policy = cfg.policy()?;
    let base = if train_each { None } else { Some(load_model(cfg)?) };
    #[derive(Serialize)]
    struct Row {
        l_slot: usize,
        avg_len: f64,
        accuracy: f64,
    }
    let mut rows = Vec::new();
    for &l in &cfg.grid {
        let avg_len = avg_sequence_length(&corpus, l, cfg.roles, &policy)?;
        let mut sample = cfg.sample_config()?;
        let accuracy = match &base {
            Some(model) => trainer::evaluate(model, &corpus, eval_range(cfg), &inference_config(&sample, Some(l)))?,
            None => {
                sample.l_slot = l;
                let mut model = Transformer::<f32>::init(cfg.model.clone())?;
                trainer::train(
                    &mut model,
                    &corpus,
                    &TrainConfig {
                        sample,
                        optim: cfg.optim.clone(),
                    },
                )?;
                trainer::evaluate(&model, &corpus, eval_range(cfg), &inference_config(&sample, None))?
            }
        };
        println!("L_slot {l:>4}  avg_len {avg_len:>8.2}  accuracy {accuracy:.3}");
        rows.push(Row {
            l_slot: l,
            avg_len,
            accuracy,
        });
    }
    let dir = RunDir::create(common.out.as_deref(), "slot-sweep")?;
    dir.write_csv("slot_sweep.csv", &["L_slot", "avg_len", "accuracy"], &rows)?;
    dir.write_manifest("slot-sweep", cfg, serde_json::json!({ "trained_per_slot": train_each }))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, common: &Common) -> Outcome {
    let corpus = corpus(cfg)?;
    let mut model = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?,
        None => Transformer::<f32>::init(cfg.model.clone())?,
    };
    let config = TrainConfig {
        sample: cfg.sample_config()?,
        optim: cfg.optim.clone(),
    };
    let report = trainer::train(&mut model, &corpus, &config)?;
    let dir = RunDir::create(common.out.as_deref(), "train")?;
    checkpoint::save(&model, dir.file("checkpoint.bin"))?;
    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
        grad_norm: f64,
        lr: f64,
    }
    let rows: Vec<Row> = report
        .losses
        .iter()
        .zip(&report.grad_norms)
        .enumerate()
        .map(|(step, (&loss, &grad_norm))| Row {
            step,
            loss,
            grad_norm,
            lr: cfg.optim.lr_at(step),
        })
        .collect();
    dir.write_csv("loss.csv", &["step", "loss", "grad_norm", "lr"], &rows)?;
    let accuracy = trainer::evaluate(
        &model,
        &corpus,
        eval_range(cfg),
        &inference_config(&config.sample, cfg.infer_l_slot),
    )?;
    println!(
        "{} steps, final loss {}, held-out token accuracy {accuracy:.3}",
        rows.len(),
        report.losses.last().map_or("n/a".into(), |l| format!("{l:.4}"))
    );
    println!("checkpoint written to {}", dir.file("checkpoint.bin").display());
    dir.write_manifest(
        "train",
        cfg,
        serde_json::json!({ "checkpoint": "checkpoint.bin", "loss_csv": "loss.csv", "accuracy": accuracy }),
    )?;
    Ok(())
}

fn entries(step: &slotstream::StreamStep) -> String {
    step.tokens
        .iter()
        .zip(&step.positions)
        .zip(&step.tags)
        .map(|((t, p), tag)| format!("{tag}:{t}@{p}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn kind(k: StepKind) -> &'static str {
    match k {
        StepKind::Prefill => "prefill",
        StepKind::Read => "read",
        StepKind::Write => "write",
        StepKind::Finish => "finish",
    }
}

pub fn demo(cfg: &RunConfig, common: &Common, source: &[TokenId], target: Option<&[TokenId]>) -> Outcome {
    if source.is_empty() {
        return Err(Failure::Usage(anyhow!("demo needs at least one source token")));
    }
    let model = load_model(cfg)?;
    let policy = cfg.policy()?;
    let strategy = match cfg.strategies()?.as_slice() {
        [one] => *one,
        _ => Strategy::ExPost {
            l_slot: cfg.infer_l_slot(),
        },
    };
    let mut engine = EngineConfig::new(policy, strategy)
        .roles(cfg.roles)
        .record_replay(false);
    if let Some(t) = target {
        engine = engine.decode(Decode::Forced(t.to_vec()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "strategy {strategy}, policy {policy}, source {source:?}");
    let mut session = StreamSession::new(&model, source, engine)?;
    let mut n = 0;
    while let Some(step) = session.step()? {
        let emitted = step.emitted.map_or(String::new(), |t| format!(" -> emit {t}"));
        let line = format!(
            "{n:>3} {:<7} read={:<3} fed [{}]{emitted}",
            kind(step.kind),
            step.src_read,
            entries(step)
        );
        let slot = session.allocation().map_or(String::new(), |a| {
            format!("  slot {} @{}", a.current_slot().index, a.current_slot().start_pos)
        });
        let _ = writeln!(out, "{line}{slot}");
        n += 1;
    }
    let layout = session.layout().clone();
    let trace = session.into_trace();
    let targets: Vec<String> = layout
        .entries
        .iter()
        .filter(|e| e.tag == Tag::Target)
        .map(|e| e.position.to_string())
        .collect();
    let _ = writeln!(out, "output {:?}", trace.output);
    let _ = writeln!(out, "delays {:?}", trace.delays);
    let _ = writeln!(out, "target positions {}", targets.join(" "));
    let _ = writeln!(out, "cache layout:");
    out.push_str(&layout.to_text());
    print!("{out}");
    if let Some(dir) = &common.out {
        let dir = RunDir::create(Some(dir), "demo")?;
        std::fs::write(dir.file("demo.txt"), &out)?;
        std::fs::write(dir.file("trace.jsonl"), trace.to_jsonl()?)?;
        dir.write_manifest("demo", cfg, serde_json::json!({ "source": source, "target": target }))?;
    }
    Ok(())
}

pub fn layout(cfg: &RunConfig, source: &[TokenId], target: &[TokenId], mask: bool) -> Outcome {
    if source.is_empty() || target.is_empty() {
        return Err(Failure::Usage(anyhow!("layout needs source and target tokens")));
    }
    let sample = build_sample(source, target, &cfg.sample_config()?)?;
    print!("{}", sample.layout.to_text());
    if mask {
        println!();
        print!("{}", sample.mask.to_labeled_grid(&sample.layout));
    }
    Ok(())
}
