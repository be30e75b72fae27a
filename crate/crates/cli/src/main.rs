//! `slotstream` command-line driver.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotstream::verify::Fault;

use crate::config::{parse_lslot, parse_tokens, RunConfig, Tokens};

#[derive(Parser, Debug)]
#[command(
    name = "slotstream",
    version,
    about = "Slot-allocated KV reuse for streaming translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy names, comma separated. An empty value selects none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    strategy: Option<Vec<String>>,
    /// `wait-k:K`, `read-n:N[,cap]`; `compare` also takes bare `wait-k` or `read-n`.
    #[arg(long)]
    policy: Vec<String>,
    /// Training slot length, optionally with a different inference one.
    #[arg(long, value_parser = parse_lslot, value_name = "N[,infer=M]")]
    lslot: Option<(usize, Option<usize>)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for CSV output and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smaller trial and evaluation counts.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suite.
    Verify {
        #[arg(long, value_name = "NAME")]
        inject_fault: Option<Fault>,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy, LAAL and GFLOPs per strategy and policy.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Average training length and accuracy per slot length.
    SlotSweep {
        /// Slot lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        /// Train a model per slot length instead of evaluating one model.
        #[arg(long)]
        train: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy model and write a checkpoint and loss curve.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Print a stream step by step.
    Demo {
        /// Source tokens.
        #[arg(long, value_parser = parse_tokens)]
        source: Tokens,
        /// Force these target tokens instead of greedy decoding.
        #[arg(long, value_parser = parse_tokens)]
        target: Option<Tokens>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the training layout and mask of one pair.
    Layout {
        #[arg(long, value_parser = parse_tokens)]
        source: Tokens,
        #[arg(long, value_parser = parse_tokens)]
        target: Tokens,
        /// Also print the attention mask.
        #[arg(long)]
        mask: bool,
        #[command(flatten)]
        common: Common,
    },
}

pub enum Failure {
    Usage(anyhow::Error),
    Property(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<slotstream::Error> for Failure {
    fn from(e: slotstream::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Loads the config file and applies flag overrides.
fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.strategy {
        cfg.strategies = s.iter().filter(|s| !s.is_empty()).cloned().collect();
    }
    match common.policy.as_slice() {
        [] => {}
        [one] if one.contains(':') => {
            cfg.policy = one.clone();
            cfg.compare_policies = vec![one.clone()];
        }
        many => cfg.compare_policies = many.to_vec(),
    }
    if let Some((train, infer)) = common.lslot {
        cfg.l_slot = train;
        cfg.infer_l_slot = infer;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.model.seed = cfg.seed;
    cfg.optim.seed = cfg.seed;
    if common.checkpoint.is_some() {
        cfg.checkpoint = common.checkpoint.clone();
    }
    if common.quick {
        cfg.eval_pairs = cfg.eval_pairs.min(20);
    }
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify { inject_fault, common } => {
            let cfg = resolve(&common)?;
            commands::verify(&cfg, &common, inject_fault)
        }
        Command::Compare { common } => commands::compare(&resolve(&common)?, &common),
        Command::SlotSweep { grid, train, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(grid) = grid {
                if grid.is_empty() || grid.contains(&0) {
                    return Err(Failure::Usage(anyhow::anyhow!("slot grid entries must be at least 1")));
                }
                cfg.grid = grid;
            }
            commands::slot_sweep(&cfg, &common, train)
        }
        Command::Train { steps, common } => {
            let mut cfg = resolve(&common)?;
            if let Some(steps) = steps {
                cfg.optim.steps = steps;
            }
            commands::train(&cfg, &common)
        }
        Command::Demo { source, target, common } => commands::demo(
            &resolve(&common)?,
            &common,
            &source.0,
            target.as_ref().map(|t| t.0.as_slice()),
        ),
        Command::Layout {
            source,
            target,
            mask,
            common,
        } => commands::layout(&resolve(&common)?, &source.0, &target.0, mask),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Property(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
