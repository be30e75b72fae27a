//! Position-slot allocation and the layout generators for every strategy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{special, PositionId, Role, Tag, TokenId};

/// Lengths of the fixed instruction prefix and of each role-marker block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleLens {
    pub prompt: usize,
    pub user: usize,
    pub assistant: usize,
}

impl Default for RoleLens {
    fn default() -> Self {
        Self {
            prompt: 0,
            user: 1,
            assistant: 1,
        }
    }
}

impl RoleLens {
    pub fn new(prompt: usize, user: usize, assistant: usize) -> Self {
        Self {
            prompt,
            user,
            assistant,
        }
    }

    pub fn bare() -> Self {
        Self::new(0, 0, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub token: TokenId,
    pub position: PositionId,
    pub tag: Tag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub entries: Vec<LayoutEntry>,
}

impl LayoutPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, token: TokenId, position: PositionId, tag: Tag) {
        self.entries.push(LayoutEntry { token, position, tag });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|e| e.token).collect()
    }

    pub fn positions(&self) -> Vec<PositionId> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.entries.iter().map(|e| e.tag).collect()
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.entries.iter().filter(|e| e.tag == tag).count()
    }

    pub fn max_position(&self) -> Option<PositionId> {
        self.entries.iter().map(|e| e.position).max()
    }

    /// Checks that position ids strictly increase within each run of equal tags.
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.entries.windows(2).enumerate() {
            if w[0].tag == w[1].tag && w[1].position <= w[0].position {
                return Err(Error::Layout(format!(
                    "entries {} and {} ({}) do not increase in position",
                    i,
                    i + 1,
                    w[0].tag
                )));
            }
        }
        Ok(())
    }

    /// One line per entry: `index tag token position`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{} {} {} {}", i, e.tag, e.token, e.position);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan = LayoutPlan::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Layout(format!("line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad("expected `index tag token position`"));
            }
            let index: usize = fields[0].parse().map_err(|_| bad("bad index"))?;
            if index != plan.len() {
                return Err(bad("indices must be consecutive from 0"));
            }
            let tag: Tag = fields[1].parse().map_err(|e: String| bad(&e))?;
            let token = fields[2].parse().map_err(|_| bad("bad token"))?;
            let position = fields[3].parse().map_err(|_| bad("bad position"))?;
            plan.push(token, position, tag);
        }
        Ok(plan)
    }

    fn push_block(&mut self, token: TokenId, tag: Tag, len: usize, next: &mut PositionId) {
        for _ in 0..len {
            self.push(token, *next, tag);
            *next += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotState {
    pub index: usize,
    pub start_pos: PositionId,
    pub filled: usize,
}

/// One position handed out by the allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placed {
    pub tag: Tag,
    pub position: PositionId,
}

/// Slot state machine: sources fill reserved slots, targets follow
/// `slot start + L_slot`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationState {
    pub l_slot: usize,
    pub roles: RoleLens,
    /// Place a user role block in front of every slot after the first.
    pub role_per_slot: bool,
    pub max_position: usize,
    pub slots: Vec<SlotState>,
    /// One past the highest position handed out so far.
    pub next_free_pos: PositionId,
    pub last_target_end: Option<PositionId>,
    targets_in_slot: usize,
}

impl AllocationState {
    pub fn new(l_slot: usize, roles: RoleLens) -> Result<Self> {
        if l_slot == 0 {
            return Err(Error::Layout("L_slot must be at least 1".into()));
        }
        let start = roles.prompt + roles.user;
        Ok(Self {
            l_slot,
            roles,
            role_per_slot: true,
            max_position: usize::MAX,
            slots: vec![SlotState {
                index: 0,
                start_pos: start,
                filled: 0,
            }],
            next_free_pos: start,
            last_target_end: None,
            targets_in_slot: 0,
        })
    }

    pub fn with_max_position(mut self, max_position: usize) -> Self {
        self.max_position = max_position;
        self
    }

    pub fn with_role_per_slot(mut self, on: bool) -> Self {
        self.role_per_slot = on;
        self
    }

    pub fn current_slot(&self) -> &SlotState {
        self.slots.last().expect("at least one slot")
    }

    /// Start of the assistant segment of the current slot.
    pub fn target_start(&self) -> PositionId {
        self.current_slot().start_pos + self.l_slot
    }

    /// Positions of the user role block preceding slot `i`.
    pub fn user_role_positions(&self, i: usize) -> std::ops::Range<PositionId> {
        let start = self.slots[i].start_pos;
        if i == 0 || self.role_per_slot {
            start - self.roles.user..start
        } else {
            start..start
        }
    }

    pub fn place_source(&mut self, n_tokens: usize) -> Result<Vec<PositionId>> {
        Ok(self
            .place_source_detailed(n_tokens)?
            .into_iter()
            .filter(|p| p.tag == Tag::Source)
            .map(|p| p.position)
            .collect())
    }

    /// Like [`place_source`](Self::place_source) but also reports the user
    /// role blocks opened on the way, in position order.
    pub fn place_source_detailed(&mut self, n_tokens: usize) -> Result<Vec<Placed>> {
        if n_tokens == 0 {
            return Err(Error::Invalid("place_source needs at least one token".into()));
        }
        let mut next = self.clone();
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            if next.current_slot().filled == next.l_slot {
                let slot_end = next.current_slot().start_pos + next.l_slot;
                let mut pos = next.next_free_pos.max(slot_end);
                if next.role_per_slot {
                    for _ in 0..next.roles.user {
                        out.push(Placed {
                            tag: Tag::Role(Role::User),
                            position: pos,
                        });
                        pos += 1;
                    }
                }
                next.slots.push(SlotState {
                    index: next.slots.len(),
                    start_pos: pos,
                    filled: 0,
                });
                next.targets_in_slot = 0;
                next.next_free_pos = pos;
            }
            let slot = next.slots.last_mut().expect("slot");
            let pos = slot.start_pos + slot.filled;
            slot.filled += 1;
            next.next_free_pos = next.next_free_pos.max(pos + 1);
            out.push(Placed {
                tag: Tag::Source,
                position: pos,
            });
        }
        next.check_budget(&out)?;
        *self = next;
        Ok(out)
    }

    pub fn place_target(&mut self, n_tokens: usize) -> Result<Vec<PositionId>> {
        Ok(self
            .place_target_detailed(n_tokens)?
            .into_iter()
            .filter(|p| p.tag == Tag::Target)
            .map(|p| p.position)
            .collect())
    }

    /// Like [`place_target`](Self::place_target) but also reports the
    /// assistant role block when this is the first target of the slot.
    pub fn place_target_detailed(&mut self, n_tokens: usize) -> Result<Vec<Placed>> {
        let mut next = self.clone();
        let mut out = Vec::with_capacity(n_tokens + self.roles.assistant);
        for _ in 0..n_tokens {
            let mut pos = match next.last_target_end {
                Some(end) if next.targets_in_slot > 0 => end + 1,
                _ => next.target_start(),
            };
            if next.targets_in_slot == 0 {
                for _ in 0..next.roles.assistant {
                    out.push(Placed {
                        tag: Tag::Role(Role::Assistant),
                        position: pos,
                    });
                    pos += 1;
                }
            }
            let floor = next.target_start() + next.roles.assistant;
            let pos = match next.last_target_end {
                Some(end) => pos.max(end + 1).max(floor),
                None => pos.max(floor),
            };
            out.push(Placed {
                tag: Tag::Target,
                position: pos,
            });
            next.last_target_end = Some(pos);
            next.targets_in_slot += 1;
            next.next_free_pos = next.next_free_pos.max(pos + 1);
        }
        next.check_budget(&out)?;
        *self = next;
        Ok(out)
    }

    fn check_budget(&self, placed: &[Placed]) -> Result<()> {
        match placed.iter().map(|p| p.position).max() {
            Some(p) if p >= self.max_position => Err(Error::PositionOverflow {
                position: p,
                max_position: self.max_position,
            }),
            _ => Ok(()),
        }
    }

    /// Unfilled positions per slot.
    pub fn gaps(&self) -> Vec<usize> {
        self.slots.iter().map(|s| self.l_slot - s.filled).collect()
    }
}

/// Contiguous layout `[prompt, role_u, S', role_a, T']` used by recomputation.
pub fn layout_recompute(source: &[TokenId], target: &[TokenId], roles: RoleLens) -> LayoutPlan {
    let mut plan = LayoutPlan::new();
    let mut next = 0;
    plan.push_block(special::PROMPT, Tag::Prompt, roles.prompt, &mut next);
    plan.push_block(special::USER, Tag::Role(Role::User), roles.user, &mut next);
    for &s in source {
        plan.push(s, next, Tag::Source);
        next += 1;
    }
    plan.push_block(
        special::ASSISTANT,
        Tag::Role(Role::Assistant),
        roles.assistant,
        &mut next,
    );
    for &t in target {
        plan.push(t, next, Tag::Target);
        next += 1;
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chunk {
    Source(Vec<TokenId>),
    Target(Vec<TokenId>),
}

impl Chunk {
    fn is_source(&self) -> bool {
        matches!(self, Chunk::Source(_))
    }
}

/// Multi-turn layout: every chunk is preceded by its role block and
/// positions run contiguously.
pub fn layout_conversational(chunks: &[Chunk], roles: RoleLens) -> Result<LayoutPlan> {
    for (i, w) in chunks.windows(2).enumerate() {
        if w[0].is_source() == w[1].is_source() {
            return Err(Error::Layout(format!(
                "chunks {} and {} are both {}",
                i,
                i + 1,
                if w[0].is_source() { "source" } else { "target" }
            )));
        }
    }
    let mut plan = LayoutPlan::new();
    let mut next = 0;
    plan.push_block(special::PROMPT, Tag::Prompt, roles.prompt, &mut next);
    for chunk in chunks {
        let (role, len, tag, tokens) = match chunk {
            Chunk::Source(t) => (Role::User, roles.user, Tag::Source, t),
            Chunk::Target(t) => (Role::Assistant, roles.assistant, Tag::Target, t),
        };
        plan.push_block(role.token(), Tag::Role(role), len, &mut next);
        for &tok in tokens {
            plan.push(tok, next, tag);
            next += 1;
        }
    }
    Ok(plan)
}

/// Independent position spaces: sources at `0..|S'|`, targets at `0..|T'|`.
pub fn layout_grouped(source: &[TokenId], target: &[TokenId]) -> LayoutPlan {
    let mut plan = LayoutPlan::new();
    for (i, &s) in source.iter().enumerate() {
        plan.push(s, i, Tag::Source);
    }
    for (j, &t) in target.iter().enumerate() {
        plan.push(t, j, Tag::Target);
    }
    plan
}
