//! Training sequences laid out the way the streaming engine will see them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{layout_recompute, AllocationState, LayoutPlan, RoleLens};
use crate::masking::{build_causal_mask, build_policy_mask, MaskMatrix};
use crate::policy::{waitk_g, PolicyKind, PolicySpec};
use crate::tokens::{special, PositionId, Role, Tag, TokenId};

/// Training configuration and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Slot layout with the policy mask.
    Full,
    /// Slot layout with a plain causal mask.
    WithoutMasking,
    /// Contiguous layout with the policy mask.
    WithoutSlot,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::WithoutMasking, Variant::WithoutSlot];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutMasking => "w/o-masking",
            Variant::WithoutSlot => "w/o-slot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub l_slot: usize,
    pub policy: PolicySpec,
    pub roles: RoleLens,
    pub variant: Variant,
}

impl SampleConfig {
    pub fn new(l_slot: usize, policy: PolicySpec) -> Self {
        Self {
            l_slot,
            policy,
            roles: RoleLens::default(),
            variant: Variant::Full,
        }
    }

    pub fn variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn roles(mut self, roles: RoleLens) -> Self {
        self.roles = roles;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub layout: LayoutPlan,
    pub mask: MaskMatrix,
    /// True on the TARGET content entries that are fed to the model.
    pub loss_mask: Vec<bool>,
    /// Next-token label on each prediction row: the entry fed just before a
    /// target is emitted (its assistant role block or the previous target).
    pub labels: Vec<Option<TokenId>>,
    /// Source tokens read before each emitted token.
    pub g: Vec<usize>,
    /// Every emitted token, including segment ends and the closing EOS.
    pub emitted: Vec<TokenId>,
    pub src_len: usize,
}

impl TrainingSample {
    /// Layout row predicting each emitted token, in emission order.
    pub fn prediction_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.emitted.len());
        for (r, l) in self.labels.iter().enumerate() {
            if l.is_some() {
                rows.push(r);
            }
        }
        rows
    }

    pub fn fed_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

pub fn segment_source(source: &[TokenId], l_slot: usize) -> Result<Vec<Vec<TokenId>>> {
    if l_slot == 0 {
        return Err(Error::Layout("L_slot must be at least 1".into()));
    }
    Ok(source.chunks(l_slot).map(<[TokenId]>::to_vec).collect())
}

/// Emission script and delays a policy produces when it streams `target`.
///
/// Wait-k emits the target then EOS. Read-n spreads the target over READ
/// segments in proportion to the source read so far, closing each segment
/// with EOSEG unless it hit the write cap, and closes with EOS once the
/// source is exhausted.
pub fn policy_targets(src_len: usize, target: &[TokenId], policy: &PolicySpec) -> Result<(Vec<TokenId>, Vec<usize>)> {
    policy.validate()?;
    if target.iter().any(|&t| special::is_special(t)) {
        return Err(Error::Invalid("targets must be content tokens".into()));
    }
    let mut emitted = Vec::with_capacity(target.len() + 1);
    let mut g = Vec::with_capacity(target.len() + 1);
    match policy.kind {
        PolicyKind::WaitK => {
            for j in 1..=target.len() + 1 {
                g.push(waitk_g(j, policy.param, src_len));
            }
            emitted.extend_from_slice(target);
            emitted.push(special::EOS);
        }
        PolicyKind::ReadN => {
            let t_len = target.len();
            let mut read = 0;
            let mut done = 0;
            while read < src_len {
                read = (read + policy.param).min(src_len);
                if read == src_len {
                    break;
                }
                let quota = read * t_len / src_len;
                let mut written = 0;
                while done < quota && written < policy.write_cap {
                    emitted.push(target[done]);
                    g.push(read);
                    done += 1;
                    written += 1;
                }
                if written < policy.write_cap {
                    emitted.push(special::EOSEG);
                    g.push(read);
                }
            }
            for &t in &target[done..] {
                emitted.push(t);
                g.push(read);
            }
            emitted.push(special::EOS);
            g.push(read);
        }
    }
    Ok((emitted, g))
}

fn check_delays(src_len: usize, emitted: &[TokenId], g: &[usize]) -> Result<()> {
    if emitted.len() != g.len() {
        return Err(Error::Delays(format!(
            "{} emitted tokens but {} delays",
            emitted.len(),
            g.len()
        )));
    }
    if emitted.last() != Some(&special::EOS) || emitted[..emitted.len() - 1].contains(&special::EOS) {
        return Err(Error::Delays("the emission script must end with its only EOS".into()));
    }
    for (j, w) in g.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(Error::Delays(format!("delays decrease at target {}", j + 2)));
        }
    }
    if let Some(&bad) = g.iter().find(|&&x| x > src_len) {
        return Err(Error::Delays(format!("delay {bad} exceeds source length {src_len}")));
    }
    Ok(())
}

struct Draft {
    token: TokenId,
    position: PositionId,
    tag: Tag,
    /// Emission index this entry predicts.
    predicts: Option<usize>,
}

/// Slot layout produced by replaying the READ/WRITE events of `g` through
/// the allocator, with every unfilled slot position materialized as PAD.
pub fn slot_layout(
    source: &[TokenId],
    emitted: &[TokenId],
    g: &[usize],
    l_slot: usize,
    roles: RoleLens,
) -> Result<(LayoutPlan, Vec<Option<usize>>)> {
    check_delays(source.len(), emitted, g)?;
    let mut alloc = AllocationState::new(l_slot, roles)?;
    let mut drafts = Vec::with_capacity(2 * (source.len() + emitted.len()));
    let mut pos = 0;
    for _ in 0..roles.prompt {
        drafts.push(Draft {
            token: special::PROMPT,
            position: pos,
            tag: Tag::Prompt,
            predicts: None,
        });
        pos += 1;
    }
    for _ in 0..roles.user {
        drafts.push(Draft {
            token: special::USER,
            position: pos,
            tag: Tag::Role(Role::User),
            predicts: None,
        });
        pos += 1;
    }
    let mut read = 0;
    let mut read_to = |upto: usize, alloc: &mut AllocationState, drafts: &mut Vec<Draft>| -> Result<()> {
        if upto > read {
            let mut next = read;
            for p in alloc.place_source_detailed(upto - read)? {
                let token = match p.tag {
                    Tag::Source => {
                        next += 1;
                        source[next - 1]
                    }
                    _ => special::USER,
                };
                drafts.push(Draft {
                    token,
                    position: p.position,
                    tag: p.tag,
                    predicts: None,
                });
            }
            read = upto;
        }
        Ok(())
    };
    // Entry whose logits produce the next emission.
    let mut emitter: Option<usize> = None;
    for (j, (&tok, &gj)) in emitted.iter().zip(g).enumerate() {
        read_to(gj, &mut alloc, &mut drafts)?;
        for p in alloc.place_target_detailed(1)? {
            if p.tag == Tag::Target {
                let e = match emitter {
                    Some(e) => e,
                    None if !drafts.is_empty() => drafts.len() - 1,
                    None => return Err(Error::Layout("no row to emit the first target from".into())),
                };
                drafts[e].predicts = Some(j);
                if tok != special::EOS {
                    drafts.push(Draft {
                        token: tok,
                        position: p.position,
                        tag: Tag::Target,
                        predicts: None,
                    });
                    emitter = Some(drafts.len() - 1);
                }
            } else {
                drafts.push(Draft {
                    token: special::ASSISTANT,
                    position: p.position,
                    tag: p.tag,
                    predicts: None,
                });
                emitter = Some(drafts.len() - 1);
            }
        }
    }
    read_to(source.len(), &mut alloc, &mut drafts)?;
    for slot in &alloc.slots {
        for f in slot.filled..l_slot {
            drafts.push(Draft {
                token: special::PAD,
                position: slot.start_pos + f,
                tag: Tag::Pad,
                predicts: None,
            });
        }
    }
    drafts.sort_by_key(|d| d.position);
    let mut layout = LayoutPlan::new();
    let mut predicts = Vec::with_capacity(drafts.len());
    for d in drafts {
        layout.push(d.token, d.position, d.tag);
        predicts.push(d.predicts);
    }
    Ok((layout, predicts))
}

/// Training sample for an explicit emission script and its delays.
pub fn build_from_delays(
    source: &[TokenId],
    emitted: &[TokenId],
    g: &[usize],
    l_slot: usize,
    roles: RoleLens,
    variant: Variant,
) -> Result<TrainingSample> {
    let (layout, predicts) = match variant {
        Variant::Full | Variant::WithoutMasking => slot_layout(source, emitted, g, l_slot, roles)?,
        Variant::WithoutSlot => {
            check_delays(source.len(), emitted, g)?;
            let fed = &emitted[..emitted.len() - 1];
            let layout = layout_recompute(source, fed, roles);
            let first = (roles.prompt + roles.user + source.len() + roles.assistant)
                .checked_sub(1)
                .ok_or_else(|| Error::Layout("no row to emit the first target from".into()))?;
            let mut predicts = vec![None; layout.len()];
            for j in 0..emitted.len() {
                predicts[first + j] = Some(j);
            }
            (layout, predicts)
        }
    };
    let mask = match variant {
        Variant::WithoutMasking => build_causal_mask(&layout),
        _ => build_policy_mask(&layout, g)?,
    };
    let labels = predicts.iter().map(|p| p.map(|j| emitted[j])).collect();
    let loss_mask = layout.entries.iter().map(|e| e.tag == Tag::Target).collect();
    Ok(TrainingSample {
        layout,
        mask,
        loss_mask,
        labels,
        g: g.to_vec(),
        emitted: emitted.to_vec(),
        src_len: source.len(),
    })
}

pub fn build_training_sequence(
    source: &[TokenId],
    target: &[TokenId],
    l_slot: usize,
    policy: &PolicySpec,
    roles: RoleLens,
) -> Result<TrainingSample> {
    let (emitted, g) = policy_targets(source.len(), target, policy)?;
    build_from_delays(source, &emitted, &g, l_slot, roles, Variant::Full)
}

pub fn build_sample(source: &[TokenId], target: &[TokenId], config: &SampleConfig) -> Result<TrainingSample> {
    let (emitted, g) = policy_targets(source.len(), target, &config.policy)?;
    build_from_delays(source, &emitted, &g, config.l_slot, config.roles, config.variant)
}

/// Slot layout length counted without building it.
pub fn closed_form_length(src_len: usize, emitted: &[TokenId], g: &[usize], l_slot: usize, roles: RoleLens) -> usize {
    let slots = src_len.div_ceil(l_slot).max(1);
    let slot_of = |x: usize| x.saturating_sub(1) / l_slot;
    let mut with_targets: Vec<usize> = g.iter().map(|&x| slot_of(x)).collect();
    with_targets.dedup();
    let fed = emitted.iter().filter(|&&t| t != special::EOS).count();
    roles.prompt + slots * (roles.user + l_slot) + roles.assistant * with_targets.len() + fed
}
