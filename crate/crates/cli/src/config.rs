use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slotstream::trainer::{OptimConfig, SampleConfig, ToyCorpusSpec, Variant};
use slotstream::{ModelConfig, PolicySpec, RoleLens, Strategy};

/// Everything a run depends on. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Strategies for `compare`.
    pub strategies: Vec<String>,
    /// Policy for training, demos and single-policy runs.
    pub policy: String,
    /// Policies for `compare`. A bare family name expands to its sweep.
    pub compare_policies: Vec<String>,
    pub l_slot: usize,
    /// Inference slot length; the training one when unset.
    pub infer_l_slot: Option<usize>,
    pub variant: Variant,
    pub roles: RoleLens,
    pub corpus: ToyCorpusSpec,
    pub optim: OptimConfig,
    /// Drives model initialization and batch order.
    pub seed: u64,
    pub eval_start: usize,
    pub eval_pairs: usize,
    pub grid: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 64,
                n_heads: 4,
                n_layers: 2,
                d_ff: 128,
                vocab_size: 64,
                ..ModelConfig::default()
            },
            strategies: Strategy::NAMES.iter().map(|s| s.to_string()).collect(),
            policy: "wait-k:3".into(),
            compare_policies: vec!["wait-k".into(), "read-n".into()],
            l_slot: 16,
            infer_l_slot: None,
            variant: Variant::Full,
            roles: RoleLens::default(),
            corpus: ToyCorpusSpec::default(),
            optim: OptimConfig::default(),
            seed: 0,
            eval_start: 100_000,
            eval_pairs: 200,
            grid: vec![4, 8, 16, 32, 64, 128],
            checkpoint: None,
        }
    }
}

pub const WAIT_K_SWEEP: [usize; 4] = [1, 3, 5, 7];
pub const READ_N_SWEEP: [usize; 6] = [3, 5, 7, 9, 11, 13];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn infer_l_slot(&self) -> usize {
        self.infer_l_slot.unwrap_or(self.l_slot)
    }

    pub fn policy(&self) -> Result<PolicySpec> {
        Ok(self.policy.parse()?)
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        Ok(SampleConfig::new(self.l_slot, self.policy()?)
            .roles(self.roles)
            .variant(self.variant))
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.strategies
            .iter()
            .map(|s| Ok(Strategy::parse(s, self.infer_l_slot())?))
            .collect()
    }

    pub fn compare_policies(&self) -> Result<Vec<PolicySpec>> {
        let mut out = Vec::new();
        for p in &self.compare_policies {
            match p.as_str() {
                "wait-k" => out.extend(WAIT_K_SWEEP.map(PolicySpec::wait_k)),
                "read-n" => out.extend(READ_N_SWEEP.map(PolicySpec::read_n)),
                other => out.push(other.parse()?),
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        if self.l_slot == 0 || self.infer_l_slot == Some(0) {
            bail!("L_slot must be at least 1");
        }
        if self.grid.contains(&0) {
            bail!("slot grid entries must be at least 1");
        }
        if self.eval_pairs == 0 {
            bail!("eval_pairs must be at least 1");
        }
        self.policy()?;
        self.strategies()?;
        self.compare_policies()?;
        Ok(())
    }
}

/// `N` or `N,infer=M`.
pub fn parse_lslot(s: &str) -> std::result::Result<(usize, Option<usize>), String> {
    let bad = || format!("bad slot length `{s}`; expected N or N,infer=M");
    let (train, infer) = match s.split_once(',') {
        Some((t, rest)) => {
            let m = rest.strip_prefix("infer=").ok_or_else(bad)?;
            (t, Some(m.parse().map_err(|_| bad())?))
        }
        None => (s, None),
    };
    let train: usize = train.parse().map_err(|_| bad())?;
    if train == 0 || infer == Some(0) {
        return Err("slot lengths must be at least 1".into());
    }
    Ok((train, infer))
}

/// Token ids given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens(pub Vec<u32>);

/// Integers separated by whitespace or commas.
pub fn parse_tokens(s: &str) -> std::result::Result<Tokens, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad token `{t}`")))
        .collect::<std::result::Result<_, _>>()
        .map(Tokens)
}
