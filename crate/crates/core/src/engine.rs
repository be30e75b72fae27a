//! The READ/WRITE loop: model + cache + allocator + policy, one strategy per run.
//!
//! Emitted target tokens are fed lazily: `t_j` enters the cache at the WRITE
//! that predicts `t_{j+1}`, so it attends to every source read up to then.
//! The row whose logits produce `t_j` is therefore either `t_{j-1}` or the
//! last entry of the assistant role block opened for `t_j`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{CacheMark, KvCache};
use crate::layout::{layout_recompute, AllocationState, LayoutEntry, LayoutPlan, RoleLens};
use crate::linalg::argmax;
use crate::masking::{build_causal_mask, build_policy_mask, MaskMatrix};
use crate::metrics::FlopsModel;
use crate::model::{ForwardInput, Transformer, Visibility};
use crate::policy::{next_action, Action, PolicySpec, PolicyState};
use crate::scalar::Scalar;
use crate::tokens::{special, PositionId, Role, Tag, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Pre-allocated position slots; append-only cache.
    ExPost { l_slot: usize },
    /// Re-encode the layout after every READ. `from_scratch` also re-encodes the prompt.
    Recompute { from_scratch: bool },
    /// Contiguous positions for new tokens, stale cache kept.
    NaiveReuse,
    /// Append-only multi-turn layout, one role block per READ/WRITE run.
    Conversational,
    /// Separate position spaces for source and target.
    Grouped,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ExPost { .. } => "expost",
            Strategy::Recompute { .. } => "recompute",
            Strategy::NaiveReuse => "naive-reuse",
            Strategy::Conversational => "conversational",
            Strategy::Grouped => "grouped",
        }
    }

    pub fn recompute() -> Self {
        Strategy::Recompute { from_scratch: false }
    }

    /// Parses a strategy name; `l_slot` is used by `expost`.
    pub fn parse(name: &str, l_slot: usize) -> Result<Self> {
        Ok(match name {
            "expost" => Strategy::ExPost { l_slot },
            "recompute" => Strategy::recompute(),
            "recompute-scratch" => Strategy::Recompute { from_scratch: true },
            "naive-reuse" => Strategy::NaiveReuse,
            "conversational" => Strategy::Conversational,
            "grouped" => Strategy::Grouped,
            other => return Err(Error::Invalid(format!("unknown strategy `{other}`"))),
        })
    }

    pub const NAMES: [&'static str; 5] = ["expost", "recompute", "naive-reuse", "conversational", "grouped"];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::ExPost { l_slot } => write!(f, "expost(L={l_slot})"),
            Strategy::Recompute { from_scratch: true } => f.write_str("recompute-scratch"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::parse(s, 16)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    /// Emit this script regardless of the logits, then EOS.
    Forced(Vec<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: PolicySpec,
    pub strategy: Strategy,
    pub roles: RoleLens,
    pub decode: Decode,
    /// Total WRITE budget; `4|S| + 8` when unset.
    pub write_cap: Option<usize>,
    /// Keep per-step layouts so the trace can be replayed without a cache.
    pub record_replay: bool,
}

impl EngineConfig {
    pub fn new(policy: PolicySpec, strategy: Strategy) -> Self {
        Self {
            policy,
            strategy,
            roles: RoleLens::default(),
            decode: Decode::Greedy,
            write_cap: None,
            record_replay: true,
        }
    }

    pub fn roles(mut self, roles: RoleLens) -> Self {
        self.roles = roles;
        self
    }

    pub fn decode(mut self, decode: Decode) -> Self {
        self.decode = decode;
        self
    }

    pub fn write_cap(mut self, cap: usize) -> Self {
        self.write_cap = Some(cap);
        self
    }

    pub fn record_replay(mut self, on: bool) -> Self {
        self.record_replay = on;
        self
    }

    fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if let Strategy::ExPost { l_slot: 0 } = self.strategy {
            return Err(Error::Layout("L_slot must be at least 1".into()));
        }
        if self.strategy != Strategy::Grouped && self.roles.assistant == 0 {
            return Err(Error::Invalid(
                "the streaming engine needs an assistant role block of length >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Prefill,
    Read,
    Write,
    Finish,
}

/// How a WRITE step is reproduced by a fresh uncached forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayVisibility {
    Causal,
    /// Policy mask with these delays.
    Policy(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub layout: LayoutPlan,
    pub visibility: ReplayVisibility,
}

impl Replay {
    pub fn mask(&self) -> Result<MaskMatrix> {
        match &self.visibility {
            ReplayVisibility::Causal => Ok(build_causal_mask(&self.layout)),
            ReplayVisibility::Policy(g) => build_policy_mask(&self.layout, g),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStep {
    pub kind: StepKind,
    /// Source tokens consumed by a READ.
    pub count: usize,
    /// Entries fed to the model during this step.
    pub tokens: Vec<TokenId>,
    pub positions: Vec<PositionId>,
    pub tags: Vec<Tag>,
    pub emitted: Option<TokenId>,
    /// Logits of the row that produced `emitted`.
    pub logits: Vec<f64>,
    /// Source tokens read when this step ran.
    pub src_read: usize,
    pub cache_len_before: usize,
    pub cache_len_after: usize,
    pub flops: f64,
    /// `(cached, new)` per forward call.
    pub forwards: Vec<(usize, usize)>,
    /// Previously processed entries that were encoded again.
    pub recomputed: usize,
    #[serde(skip)]
    pub replay: Option<Replay>,
}

impl StreamStep {
    fn new(kind: StepKind, src_read: usize, cache_len: usize) -> Self {
        Self {
            kind,
            count: 0,
            tokens: Vec::new(),
            positions: Vec::new(),
            tags: Vec::new(),
            emitted: None,
            logits: Vec::new(),
            src_read,
            cache_len_before: cache_len,
            cache_len_after: cache_len,
            flops: 0.0,
            forwards: Vec::new(),
            recomputed: 0,
            replay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrace {
    pub strategy: Strategy,
    pub policy: PolicySpec,
    pub roles: RoleLens,
    pub source: Vec<TokenId>,
    pub steps: Vec<StreamStep>,
    /// Every emitted token, including segment and sequence terminators.
    pub output: Vec<TokenId>,
    /// `g(j)` for every emitted token.
    pub delays: Vec<usize>,
    /// The global WRITE cap stopped the run.
    pub capped: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceRecord {
    Header {
        strategy: Strategy,
        policy: PolicySpec,
        roles: RoleLens,
        source: Vec<TokenId>,
        output: Vec<TokenId>,
        delays: Vec<usize>,
        capped: bool,
    },
    Step(StreamStep),
}

impl StreamTrace {
    /// Emitted tokens without segment/sequence terminators.
    pub fn content_output(&self) -> Vec<TokenId> {
        self.output
            .iter()
            .copied()
            .filter(|&t| t != special::EOS && t != special::EOSEG)
            .collect()
    }

    pub fn content_delays(&self) -> Vec<usize> {
        self.output
            .iter()
            .zip(&self.delays)
            .filter(|(&t, _)| t != special::EOS && t != special::EOSEG)
            .map(|(_, &g)| g)
            .collect()
    }

    pub fn write_steps(&self) -> impl Iterator<Item = &StreamStep> {
        self.steps.iter().filter(|s| s.kind == StepKind::Write)
    }

    pub fn total_recomputed(&self) -> usize {
        self.steps.iter().map(|s| s.recomputed).sum()
    }

    /// One JSON record per line: a header, then one record per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&TraceRecord::Header {
            strategy: self.strategy,
            policy: self.policy,
            roles: self.roles,
            source: self.source.clone(),
            output: self.output.clone(),
            delays: self.delays.clone(),
            capped: self.capped,
        })?;
        out.push('\n');
        for s in &self.steps {
            let mut s = s.clone();
            s.replay = None;
            out.push_str(&serde_json::to_string(&TraceRecord::Step(s))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Invalid("empty trace log".into()))?;
        let TraceRecord::Header {
            strategy,
            policy,
            roles,
            source,
            output,
            delays,
            capped,
        } = serde_json::from_str(header)?
        else {
            return Err(Error::Invalid("trace log must start with a header".into()));
        };
        let mut steps = Vec::new();
        for line in lines {
            match serde_json::from_str(line)? {
                TraceRecord::Step(s) => steps.push(s),
                TraceRecord::Header { .. } => return Err(Error::Invalid("second header in trace log".into())),
            }
        }
        Ok(Self {
            strategy,
            policy,
            roles,
            source,
            steps,
            output,
            delays,
            capped,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum FeedMode {
    Causal,
    /// Source-side rows never see target-side keys; optionally causal by position.
    Sided {
        by_position: bool,
    },
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    token: TokenId,
    position: Option<PositionId>,
}

/// One streaming decode in progress. Owns its cache and allocator.
pub struct StreamSession<'m, F: Scalar> {
    model: &'m Transformer<F>,
    config: EngineConfig,
    source: Vec<TokenId>,
    flops_model: FlopsModel,
    cache: KvCache<F>,
    /// Entries held by the cache, in cache order.
    layout: LayoutPlan,
    policy_state: PolicyState,
    alloc: Option<AllocationState>,
    prompt_mark: Option<CacheMark>,
    emitted: Vec<TokenId>,
    delays: Vec<usize>,
    fed_targets: usize,
    pending: Option<Pending>,
    last_logits: Option<Vec<F>>,
    assistant_opened: bool,
    last_action_was_read: bool,
    write_cap: usize,
    steps: Vec<StreamStep>,
    started: bool,
    done: bool,
    capped: bool,
}

impl<'m, F: Scalar> StreamSession<'m, F> {
    pub fn new(model: &'m Transformer<F>, source: &[TokenId], config: EngineConfig) -> Result<Self> {
        config.validate()?;
        if let Some(&bad) = source.iter().find(|&&t| t as usize >= model.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "source token {bad} outside vocabulary of {}",
                model.config.vocab_size
            )));
        }
        let alloc = match config.strategy {
            Strategy::ExPost { l_slot } => {
                Some(AllocationState::new(l_slot, config.roles)?.with_max_position(model.config.max_position))
            }
            _ => None,
        };
        let write_cap = config.write_cap.unwrap_or(4 * source.len() + 8);
        Ok(Self {
            model,
            flops_model: FlopsModel::new(&model.config),
            cache: KvCache::for_model(model),
            layout: LayoutPlan::new(),
            policy_state: PolicyState::new(source.len()),
            alloc,
            prompt_mark: None,
            emitted: Vec::new(),
            delays: Vec::new(),
            fed_targets: 0,
            pending: None,
            last_logits: None,
            assistant_opened: false,
            last_action_was_read: false,
            write_cap,
            steps: Vec::new(),
            started: false,
            done: source.is_empty(),
            capped: false,
            source: source.to_vec(),
            config,
        })
    }

    pub fn cache(&self) -> &KvCache<F> {
        &self.cache
    }

    /// Entries currently in the cache, in cache order.
    pub fn layout(&self) -> &LayoutPlan {
        &self.layout
    }

    pub fn allocation(&self) -> Option<&AllocationState> {
        self.alloc.as_ref()
    }

    pub fn steps(&self) -> &[StreamStep] {
        &self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.emitted
    }

    /// Runs one step (prefill first). Returns `None` once finished.
    pub fn step(&mut self) -> Result<Option<&StreamStep>> {
        if self.done {
            return Ok(None);
        }
        let step = if !self.started {
            self.started = true;
            self.prefill()?
        } else if !self.policy_state.finished() && self.emitted.len() >= self.write_cap {
            self.capped = true;
            self.finish()
        } else {
            match next_action(&self.config.policy, &self.policy_state) {
                Action::Finish => self.finish(),
                Action::Read(n) => {
                    let s = self.read(n)?;
                    self.last_action_was_read = true;
                    s
                }
                Action::Write => {
                    let s = self.write()?;
                    self.last_action_was_read = false;
                    s
                }
            }
        };
        self.steps.push(step);
        Ok(self.steps.last())
    }

    pub fn run(mut self) -> Result<StreamTrace> {
        while self.step()?.is_some() {}
        Ok(self.into_trace())
    }

    pub fn into_trace(self) -> StreamTrace {
        StreamTrace {
            strategy: self.config.strategy,
            policy: self.config.policy,
            roles: self.config.roles,
            source: self.source,
            steps: self.steps,
            output: self.emitted,
            delays: self.delays,
            capped: self.capped,
        }
    }

    fn finish(&mut self) -> StreamStep {
        self.done = true;
        StreamStep::new(StepKind::Finish, self.policy_state.src_read, self.cache.len())
    }

    fn block(token: TokenId, tag: Tag, len: usize, next: &mut PositionId, out: &mut Vec<LayoutEntry>) {
        for _ in 0..len {
            out.push(LayoutEntry {
                token,
                position: *next,
                tag,
            });
            *next += 1;
        }
    }

    fn prefill(&mut self) -> Result<StreamStep> {
        let roles = self.config.roles;
        let mut step = StreamStep::new(StepKind::Prefill, 0, self.cache.len());
        let mut next = 0;
        let mut prompt = Vec::new();
        let mut user = Vec::new();
        match self.config.strategy {
            Strategy::Grouped => {}
            Strategy::Conversational => {
                Self::block(special::PROMPT, Tag::Prompt, roles.prompt, &mut next, &mut prompt);
            }
            _ => {
                Self::block(special::PROMPT, Tag::Prompt, roles.prompt, &mut next, &mut prompt);
                Self::block(special::USER, Tag::Role(Role::User), roles.user, &mut next, &mut user);
            }
        }
        self.feed(&prompt, FeedMode::Causal, &mut step)?;
        self.prompt_mark = Some(self.cache.snapshot());
        self.feed(&user, FeedMode::Causal, &mut step)?;
        step.cache_len_after = self.cache.len();
        Ok(step)
    }

    fn read(&mut self, n: usize) -> Result<StreamStep> {
        let roles = self.config.roles;
        let before = self.policy_state.src_read;
        let mut step = StreamStep::new(StepKind::Read, before, self.cache.len());
        step.count = n;
        let new_src = &self.source[before..before + n];
        match self.config.strategy {
            Strategy::ExPost { .. } => {
                let placed = self.alloc.as_mut().expect("allocator").place_source_detailed(n)?;
                let mut it = new_src.iter();
                let entries: Vec<LayoutEntry> = placed
                    .iter()
                    .map(|p| LayoutEntry {
                        token: match p.tag {
                            Tag::Source => *it.next().expect("one token per source slot"),
                            _ => special::USER,
                        },
                        position: p.position,
                        tag: p.tag,
                    })
                    .collect();
                self.feed(&entries, FeedMode::Sided { by_position: true }, &mut step)?;
            }
            Strategy::Recompute { from_scratch } => {
                let src_after = &self.source[..before + n];
                let plan = layout_recompute(src_after, &self.emitted, roles);
                let keep = if from_scratch {
                    0
                } else {
                    self.prompt_mark.expect("prefill ran").len()
                };
                step.recomputed = self.cache.len() - keep;
                self.cache.rollback(self.cache.mark_at(keep)?)?;
                self.layout.entries.truncate(keep);
                let entries = plan.entries[keep..].to_vec();
                self.feed(&entries, FeedMode::Causal, &mut step)?;
                self.fed_targets = self.emitted.len();
                self.pending = None;
                self.assistant_opened = true;
            }
            Strategy::NaiveReuse => {
                let base = roles.prompt + roles.user;
                let entries: Vec<LayoutEntry> = new_src
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| LayoutEntry {
                        token: t,
                        position: base + before + i,
                        tag: Tag::Source,
                    })
                    .collect();
                self.feed(&entries, FeedMode::Causal, &mut step)?;
            }
            Strategy::Conversational => {
                let mut next = self.layout.len();
                let mut entries = Vec::new();
                if let Some(p) = self.pending.take() {
                    entries.push(LayoutEntry {
                        token: p.token,
                        position: next,
                        tag: Tag::Target,
                    });
                    next += 1;
                    self.fed_targets += 1;
                }
                if !self.last_action_was_read {
                    Self::block(
                        special::USER,
                        Tag::Role(Role::User),
                        roles.user,
                        &mut next,
                        &mut entries,
                    );
                }
                for &t in new_src {
                    entries.push(LayoutEntry {
                        token: t,
                        position: next,
                        tag: Tag::Source,
                    });
                    next += 1;
                }
                self.feed(&entries, FeedMode::Causal, &mut step)?;
            }
            Strategy::Grouped => {
                let entries: Vec<LayoutEntry> = new_src
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| LayoutEntry {
                        token: t,
                        position: before + i,
                        tag: Tag::Source,
                    })
                    .collect();
                self.feed(&entries, FeedMode::Sided { by_position: false }, &mut step)?;
            }
        }
        self.policy_state.observe_read(n);
        step.cache_len_after = self.cache.len();
        Ok(step)
    }

    fn write(&mut self) -> Result<StreamStep> {
        let roles = self.config.roles;
        let src_read = self.policy_state.src_read;
        let mut step = StreamStep::new(StepKind::Write, src_read, self.cache.len());
        let mut entries = Vec::new();
        let mut mode = FeedMode::Causal;
        let mut target_pos = None;
        match self.config.strategy {
            Strategy::ExPost { .. } => {
                let placed = self.alloc.as_mut().expect("allocator").place_target_detailed(1)?;
                if let Some(p) = self.pending.take() {
                    entries.push(LayoutEntry {
                        token: p.token,
                        position: p.position.expect("expost targets are placed at emission"),
                        tag: Tag::Target,
                    });
                }
                for p in &placed {
                    match p.tag {
                        Tag::Target => target_pos = Some(p.position),
                        tag => entries.push(LayoutEntry {
                            token: special::ASSISTANT,
                            position: p.position,
                            tag,
                        }),
                    }
                }
                mode = FeedMode::Sided { by_position: true };
            }
            Strategy::Recompute { .. } | Strategy::NaiveReuse => {
                let base = roles.prompt + roles.user + src_read;
                let mut next = self.layout.len();
                if self.config.strategy == Strategy::NaiveReuse {
                    next = base + if self.assistant_opened { roles.assistant } else { 0 } + self.fed_targets;
                }
                if !self.assistant_opened {
                    Self::block(
                        special::ASSISTANT,
                        Tag::Role(Role::Assistant),
                        roles.assistant,
                        &mut next,
                        &mut entries,
                    );
                    self.assistant_opened = true;
                }
                if let Some(p) = self.pending.take() {
                    entries.push(LayoutEntry {
                        token: p.token,
                        position: next,
                        tag: Tag::Target,
                    });
                }
            }
            Strategy::Conversational => {
                let mut next = self.layout.len();
                if self.last_action_was_read {
                    Self::block(
                        special::ASSISTANT,
                        Tag::Role(Role::Assistant),
                        roles.assistant,
                        &mut next,
                        &mut entries,
                    );
                } else if let Some(p) = self.pending.take() {
                    entries.push(LayoutEntry {
                        token: p.token,
                        position: next,
                        tag: Tag::Target,
                    });
                }
            }
            Strategy::Grouped => {
                if let Some(p) = self.pending.take() {
                    entries.push(LayoutEntry {
                        token: p.token,
                        position: self.fed_targets,
                        tag: Tag::Target,
                    });
                }
                mode = FeedMode::Sided { by_position: false };
            }
        }
        self.fed_targets += entries.iter().filter(|e| e.tag == Tag::Target).count();
        let logits = if entries.is_empty() {
            self.last_logits
                .clone()
                .ok_or_else(|| Error::Invalid("nothing to predict the first target from".into()))?
        } else {
            self.feed(&entries, mode, &mut step)?
        };

        let j = self.emitted.len();
        let token = match &self.config.decode {
            Decode::Greedy => argmax(&logits) as TokenId,
            Decode::Forced(script) => script.get(j).copied().unwrap_or(special::EOS),
        };
        self.delays.push(src_read);
        if self.config.record_replay {
            step.replay = Some(self.replay_for_step());
        }
        self.emitted.push(token);
        self.policy_state.observe_write(token);
        self.pending = Some(Pending {
            token,
            position: target_pos,
        });
        step.emitted = Some(token);
        step.logits = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        step.cache_len_after = self.cache.len();
        Ok(step)
    }

    /// Layout and visibility that reproduce the current WRITE without a cache.
    fn replay_for_step(&self) -> Replay {
        match self.config.strategy {
            Strategy::ExPost { .. } => {
                let mut layout = self.layout.clone();
                layout.entries.sort_by_key(|e| e.position);
                Replay {
                    layout,
                    visibility: ReplayVisibility::Policy(self.delays.clone()),
                }
            }
            Strategy::Grouped => Replay {
                layout: self.layout.clone(),
                visibility: ReplayVisibility::Policy(self.delays.clone()),
            },
            Strategy::NaiveReuse => {
                let src = &self.source[..self.policy_state.src_read];
                let layout = layout_recompute(src, &self.emitted[..self.fed_targets], self.config.roles);
                Replay {
                    layout,
                    visibility: ReplayVisibility::Causal,
                }
            }
            Strategy::Recompute { .. } | Strategy::Conversational => Replay {
                layout: self.layout.clone(),
                visibility: ReplayVisibility::Causal,
            },
        }
    }

    /// Forwards `entries` against the cache, appends them, returns last-row logits.
    fn feed(&mut self, entries: &[LayoutEntry], mode: FeedMode, step: &mut StreamStep) -> Result<Vec<F>> {
        if entries.is_empty() {
            return Ok(Vec::new());
        }
        let tokens: Vec<TokenId> = entries.iter().map(|e| e.token).collect();
        let positions: Vec<PositionId> = entries.iter().map(|e| e.position).collect();
        let tags: Vec<Tag> = entries.iter().map(|e| e.tag).collect();
        let c = self.cache.len();
        let m = entries.len();
        let mask = match mode {
            FeedMode::Causal => None,
            FeedMode::Sided { by_position } => Some(self.sided_mask(entries, by_position)),
        };
        let mut input = ForwardInput::new(&tokens, &positions, &tags).cache(&self.cache);
        if let Some(mask) = &mask {
            input = input.visibility(Visibility::Mask(mask));
        }
        let out = self.model.forward(&input)?;
        let last = out.last_row().map(<[F]>::to_vec).unwrap_or_default();
        self.cache.append(out.delta)?;
        self.layout.entries.extend_from_slice(entries);
        self.last_logits = Some(last.clone());
        step.flops += self.flops_model.flops_forward(c, m);
        step.forwards.push((c, m));
        step.tokens.extend_from_slice(&tokens);
        step.positions.extend_from_slice(&positions);
        step.tags.extend_from_slice(&tags);
        Ok(last)
    }

    fn sided_mask(&self, entries: &[LayoutEntry], by_position: bool) -> MaskMatrix {
        let c = self.cache.len();
        let m = entries.len();
        let mut mask = MaskMatrix::new(m, c + m);
        for (t, q) in entries.iter().enumerate() {
            if q.tag == Tag::Pad {
                continue;
            }
            for col in 0..=c + t {
                let (ktag, kpos) = if col < c {
                    (self.cache.tags()[col], self.cache.positions()[col])
                } else {
                    (entries[col - c].tag, entries[col - c].position)
                };
                let visible = ktag != Tag::Pad
                    && (!by_position || kpos <= q.position)
                    && (q.tag.is_target_side() || !ktag.is_target_side());
                mask.set(t, col, visible);
            }
        }
        mask
    }
}

pub fn run_stream<F: Scalar>(model: &Transformer<F>, source: &[TokenId], config: EngineConfig) -> Result<StreamTrace> {
    StreamSession::new(model, source, config)?.run()
}

/// Re-executes every WRITE step as a fresh forward pass over its recorded
/// layout and replaces the step logits with the uncached ones.
pub fn uncached_replay<F: Scalar>(trace: &StreamTrace, model: &Transformer<F>) -> Result<StreamTrace> {
    let mut out = trace.clone();
    for step in out.steps.iter_mut().filter(|s| s.kind == StepKind::Write) {
        let replay = step
            .replay
            .as_ref()
            .ok_or_else(|| Error::Invalid("trace was recorded without replay layouts".into()))?;
        let mask = replay.mask()?;
        let tokens = replay.layout.tokens();
        let positions = replay.layout.positions();
        let tags = replay.layout.tags();
        let fwd = model.forward(&ForwardInput::new(&tokens, &positions, &tags).visibility(Visibility::Mask(&mask)))?;
        let last = fwd
            .last_row()
            .ok_or_else(|| Error::Invalid("empty replay layout".into()))?;
        step.logits = last.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        step.flops = FlopsModel::new(&model.config).flops_forward(0, tokens.len());
        step.forwards = vec![(0, tokens.len())];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub max_logit_diff: f64,
    /// Index (into the first trace's steps) of the first WRITE differing by more than `tol`.
    pub first_divergence_step: Option<usize>,
    pub token_match: bool,
    pub structural_mismatch: bool,
}

pub fn compare_traces(a: &StreamTrace, b: &StreamTrace, tol: f64) -> CompareReport {
    let wa: Vec<(usize, &StreamStep)> = a
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == StepKind::Write)
        .collect();
    let wb: Vec<&StreamStep> = b.write_steps().collect();
    let kinds_a: Vec<StepKind> = a.steps.iter().map(|s| s.kind).collect();
    let kinds_b: Vec<StepKind> = b.steps.iter().map(|s| s.kind).collect();
    let mut structural = kinds_a != kinds_b;
    let mut max_diff = 0.0f64;
    let mut first = None;
    for ((idx, sa), sb) in wa.iter().zip(&wb) {
        if sa.logits.len() != sb.logits.len() {
            structural = true;
            continue;
        }
        let d = sa
            .logits
            .iter()
            .zip(&sb.logits)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        let d = if d.is_nan() { f64::INFINITY } else { d };
        max_diff = max_diff.max(d);
        if d > tol && first.is_none() {
            first = Some(*idx);
        }
    }
    CompareReport {
        max_logit_diff: max_diff,
        first_divergence_step: first,
        token_match: a.output == b.output,
        structural_mismatch: structural,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PosScheme};

    fn model(pos: PosScheme) -> Transformer<f64> {
        Transformer::init(ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            vocab_size: 24,
            pos_scheme: pos,
            max_position: 512,
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn forced(n: usize) -> Decode {
        Decode::Forced((0..n as u32).map(|i| 10 + i).collect())
    }

    #[test]
    fn wait2_slot3_positions() {
        let m = model(PosScheme::Rotary);
        let cfg = EngineConfig::new(PolicySpec::wait_k(2), Strategy::ExPost { l_slot: 3 })
            .roles(RoleLens::new(0, 1, 1))
            .decode(forced(4));
        let trace = run_stream(&m, &[6, 7, 8, 9], cfg).unwrap();
        let mut all: Vec<(Tag, usize)> = Vec::new();
        for s in &trace.steps {
            all.extend(s.tags.iter().copied().zip(s.positions.iter().copied()));
        }
        // The last emitted token (EOS) is never fed.
        let ua = Tag::Role(Role::User);
        let aa = Tag::Role(Role::Assistant);
        assert_eq!(
            all,
            vec![
                (ua, 0),
                (Tag::Source, 1),
                (Tag::Source, 2),
                (aa, 4),
                (Tag::Source, 3),
                (Tag::Target, 5),
                (ua, 7),
                (Tag::Source, 8),
                (Tag::Target, 6),
                (aa, 11),
                (Tag::Target, 12),
                (Tag::Target, 13),
            ]
        );
        assert_eq!(trace.output, vec![10, 11, 12, 13, special::EOS]);
        assert_eq!(trace.delays, vec![2, 3, 4, 4, 4]);
        assert_eq!(trace.total_recomputed(), 0);
    }

    #[test]
    fn empty_source_finishes_immediately() {
        let m = model(PosScheme::Rotary);
        let cfg = EngineConfig::new(PolicySpec::wait_k(2), Strategy::ExPost { l_slot: 3 });
        let trace = run_stream(&m, &[], cfg).unwrap();
        assert!(trace.steps.is_empty());
        assert!(trace.output.is_empty());
    }

    fn replay_matches(strategy: Strategy, pos: PosScheme, policy: PolicySpec) {
        let m = model(pos);
        let src: Vec<u32> = (0..11).map(|i| 6 + (i * 7) % 17).collect();
        let cfg = EngineConfig::new(policy, strategy).roles(RoleLens::new(2, 1, 2));
        let trace = run_stream(&m, &src, cfg).unwrap();
        let replay = uncached_replay(&trace, &m).unwrap();
        let r = compare_traces(&trace, &replay, 1e-10);
        assert!(r.max_logit_diff <= 1e-10, "{strategy}: {r:?}");
        assert!(!r.structural_mismatch);
    }

    #[test]
    fn expost_replays_exactly() {
        for l in [1, 2, 3, 5, 16] {
            replay_matches(Strategy::ExPost { l_slot: l }, PosScheme::Rotary, PolicySpec::wait_k(2));
            replay_matches(
                Strategy::ExPost { l_slot: l },
                PosScheme::Alibi,
                PolicySpec::read_n(3).with_write_cap(2),
            );
        }
    }

    #[test]
    fn baselines_replay_exactly() {
        for s in [
            Strategy::recompute(),
            Strategy::Recompute { from_scratch: true },
            Strategy::Conversational,
            Strategy::Grouped,
        ] {
            replay_matches(s, PosScheme::Rotary, PolicySpec::wait_k(3));
            replay_matches(s, PosScheme::Alibi, PolicySpec::read_n(4).with_write_cap(3));
        }
    }

    #[test]
    fn naive_reuse_diverges_from_recompute() {
        let m = model(PosScheme::Rotary);
        let src: Vec<u32> = (6..16).collect();
        let run = |s| run_stream(&m, &src, EngineConfig::new(PolicySpec::wait_k(2), s).decode(forced(10))).unwrap();
        let naive = run(Strategy::NaiveReuse);
        let recompute = run(Strategy::recompute());
        let r = compare_traces(&naive, &recompute, 1e-3);
        assert!(!r.structural_mismatch);
        assert!(r.token_match);
        assert!(r.max_logit_diff > 1e-3);
        // The first WRITE precedes any insertion and agrees.
        let first_write = naive.steps.iter().position(|s| s.kind == StepKind::Write).unwrap();
        assert!(r.first_divergence_step.unwrap() > first_write);
        // Its uncached replay is exactly the recompute trace.
        let replay = uncached_replay(&naive, &m).unwrap();
        assert!(compare_traces(&replay, &recompute, 1e-10).max_logit_diff <= 1e-10);
    }

    #[test]
    fn recompute_charges_reencoding() {
        let m = model(PosScheme::Rotary);
        let src: Vec<u32> = (6..14).collect();
        let cfg = EngineConfig::new(PolicySpec::wait_k(1), Strategy::recompute()).decode(forced(8));
        let trace = run_stream(&m, &src, cfg).unwrap();
        assert!(trace.total_recomputed() > 0);
        let ex = run_stream(
            &m,
            &src,
            EngineConfig::new(PolicySpec::wait_k(1), Strategy::ExPost { l_slot: 4 }).decode(forced(8)),
        )
        .unwrap();
        let total = |t: &StreamTrace| t.steps.iter().map(|s| s.flops).sum::<f64>();
        assert!(total(&trace) > total(&ex));
    }

    #[test]
    fn cache_grows_except_on_recompute() {
        let m = model(PosScheme::Rotary);
        let src: Vec<u32> = (6..16).collect();
        for s in [
            Strategy::ExPost { l_slot: 4 },
            Strategy::Conversational,
            Strategy::Grouped,
            Strategy::NaiveReuse,
        ] {
            let trace = run_stream(&m, &src, EngineConfig::new(PolicySpec::wait_k(2), s)).unwrap();
            for st in &trace.steps {
                assert!(st.cache_len_after >= st.cache_len_before);
                assert_eq!(st.recomputed, 0);
                assert!(st.flops >= 0.0);
            }
        }
    }

    #[test]
    fn expost_cache_positions_by_slot() {
        let m = model(PosScheme::Rotary);
        let src: Vec<u32> = (6..19).collect();
        let mut session = StreamSession::new(
            &m,
            &src,
            EngineConfig::new(PolicySpec::read_n(3), Strategy::ExPost { l_slot: 4 }),
        )
        .unwrap();
        while session.step().unwrap().is_some() {}
        let tags = session.cache().tags();
        let pos = session.cache().positions();
        // Targets keep increasing positions in cache order; so do sources.
        for side in [Tag::Target, Tag::Source] {
            let p: Vec<_> = tags
                .iter()
                .zip(pos)
                .filter(|(t, _)| **t == side)
                .map(|(_, p)| *p)
                .collect();
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn write_cap_stops_runaway() {
        let m = model(PosScheme::Rotary);
        let cfg = EngineConfig::new(PolicySpec::wait_k(1), Strategy::ExPost { l_slot: 2 })
            .decode(Decode::Forced(vec![9; 100]))
            .write_cap(7);
        let trace = run_stream(&m, &[6, 7], cfg).unwrap();
        assert!(trace.capped);
        assert_eq!(trace.output.len(), 7);
    }

    #[test]
    fn position_budget_exhaustion_is_an_error() {
        let mut cfg = model(PosScheme::Rotary).config;
        cfg.max_position = 10;
        let m = Transformer::<f64>::init(cfg).unwrap();
        let r = run_stream(
            &m,
            &[6, 7, 8, 9, 10, 11],
            EngineConfig::new(PolicySpec::wait_k(1), Strategy::ExPost { l_slot: 4 }),
        );
        assert!(matches!(r, Err(Error::PositionOverflow { .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let m = model(PosScheme::Rotary);
        let trace = run_stream(
            &m,
            &[6, 7, 8],
            EngineConfig::new(PolicySpec::wait_k(1), Strategy::Conversational),
        )
        .unwrap();
        let text = trace.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), trace.steps.len() + 1);
        let back = StreamTrace::from_jsonl(&text).unwrap();
        let mut stripped = trace.clone();
        for s in &mut stripped.steps {
            s.replay = None;
        }
        assert_eq!(back, stripped);
    }

    #[test]
    fn trace_compared_with_itself() {
        let m = model(PosScheme::Alibi);
        let trace = run_stream(
            &m,
            &[6, 7, 8, 9],
            EngineConfig::new(PolicySpec::wait_k(2), Strategy::Grouped),
        )
        .unwrap();
        let r = compare_traces(&trace, &trace, 0.0);
        assert_eq!(r.max_logit_diff, 0.0);
        assert_eq!(r.first_divergence_step, None);
        assert!(r.token_match && !r.structural_mismatch);
    }

    #[test]
    fn delays_follow_waitk() {
        let m = model(PosScheme::Rotary);
        for k in 1..5 {
            let src: Vec<u32> = (6..15).collect();
            let trace = run_stream(
                &m,
                &src,
                EngineConfig::new(PolicySpec::wait_k(k), Strategy::ExPost { l_slot: 3 }).decode(forced(12)),
            )
            .unwrap();
            let g = crate::policy::delays_from_trace(&trace).unwrap();
            for (j, &gj) in g.iter().enumerate() {
                assert_eq!(gj, crate::policy::waitk_g(j + 1, k, src.len()));
            }
        }
    }
}
