//! Policy-consistent attention masks over materialized layouts.
//!
//! Rule, for a query row `q` and key column `k <= q` (layout order), neither PAD:
//!
//! * source-side rows (prompt, user role, source) see only source-side keys;
//! * target-side rows (assistant role, target) see every earlier target-side
//!   key, and a source-side key only if it had arrived when the row was fed.
//!
//! Arrival counts: the prompt arrives at 0, source `i` (1-based) at `i`, a
//! user role block with the first source after it. A target-side row is fed
//! while the source prefix of the next target to be predicted is visible:
//! an assistant block sees `g(j)` of the target `t_j` following it, target
//! `t_j` sees `g(j+1)` (or `g(j)` for the last target).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutPlan;
use crate::tokens::{Role, Tag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for r in 0..n {
            for c in 0..=r {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = value;
    }

    pub fn count_visible(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when no bit lies above the diagonal of the trailing square block
    /// (the new tokens of an incremental step).
    pub fn within_causal_envelope(&self) -> bool {
        let offset = self.cols.saturating_sub(self.rows);
        (0..self.rows).all(|r| (offset + r + 1..self.cols).all(|c| !self.get(r, c)))
    }

    /// 0/1 grid, one text line per row.
    pub fn to_grid(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.get(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Grid with a tag label per row, for human inspection.
    pub fn to_labeled_grid(&self, layout: &LayoutPlan) -> String {
        let mut out = String::new();
        for (r, line) in self.to_grid().lines().enumerate() {
            let label = layout
                .entries
                .get(r)
                .map(|e| format!("{}@{}", e.tag, e.position))
                .unwrap_or_default();
            let _ = writeln!(out, "{label:>14} {line}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Let source-side rows attend to earlier target-side entries.
    pub source_sees_targets: bool,
}

fn target_count(layout: &LayoutPlan) -> usize {
    layout.count(Tag::Target)
}

fn check_delays(layout: &LayoutPlan, g: &[usize]) -> Result<()> {
    let n = target_count(layout);
    if g.len() < n {
        return Err(Error::Delays(format!("{} delays for {} target tokens", g.len(), n)));
    }
    if n > 0 && g.is_empty() {
        return Err(Error::Delays("empty delay sequence".into()));
    }
    Ok(())
}

pub fn build_policy_mask(layout: &LayoutPlan, g: &[usize]) -> Result<MaskMatrix> {
    build_policy_mask_with(layout, g, MaskOptions::default())
}

pub fn build_policy_mask_with(layout: &LayoutPlan, g: &[usize], options: MaskOptions) -> Result<MaskMatrix> {
    check_delays(layout, g)?;
    let n = layout.len();
    let mut arrival = vec![0usize; n];
    let mut visible = vec![0usize; n];
    let mut sources = 0;
    let mut targets = 0;
    for (i, e) in layout.entries.iter().enumerate() {
        match e.tag {
            Tag::Source => {
                sources += 1;
                arrival[i] = sources;
            }
            Tag::Role(Role::User) => arrival[i] = sources + 1,
            Tag::Target => targets += 1,
            _ => {}
        }
        if e.tag.is_target_side() && !g.is_empty() {
            visible[i] = g[targets.min(g.len() - 1)];
        }
    }
    let mut mask = MaskMatrix::new(n, n);
    for (q, qe) in layout.entries.iter().enumerate() {
        let qt = qe.tag;
        if qt == Tag::Pad {
            continue;
        }
        for (k, ke) in layout.entries[..=q].iter().enumerate() {
            let kt = ke.tag;
            let bit = match (qt.is_target_side(), kt) {
                (_, Tag::Pad) => false,
                (false, kt) => !kt.is_target_side() || options.source_sees_targets,
                (true, kt) if kt.is_target_side() => true,
                (true, _) => arrival[k] <= visible[q],
            };
            mask.set(q, k, bit);
        }
    }
    Ok(mask)
}

/// Plain causal mask over the layout with PAD excluded in both directions.
pub fn build_causal_mask(layout: &LayoutPlan) -> MaskMatrix {
    let n = layout.len();
    let mut mask = MaskMatrix::new(n, n);
    for q in 0..n {
        for k in 0..=q {
            let pad = layout.entries[q].tag == Tag::Pad || layout.entries[k].tag == Tag::Pad;
            mask.set(q, k, !pad);
        }
    }
    mask
}

pub fn visibility_oracle(layout: &LayoutPlan, g: &[usize], row: usize, col: usize) -> Result<bool> {
    visibility_oracle_with(layout, g, row, col, MaskOptions::default())
}

/// Entry-by-entry restatement of the visibility rule, written independently
/// of [`build_policy_mask`] for differential testing.
pub fn visibility_oracle_with(
    layout: &LayoutPlan,
    g: &[usize],
    row: usize,
    col: usize,
    options: MaskOptions,
) -> Result<bool> {
    let n = layout.entries.len();
    if row >= n || col >= n {
        return Err(Error::Invalid(format!(
            "({row}, {col}) outside a layout of {n} entries"
        )));
    }
    check_delays(layout, g)?;
    if col > row {
        return Ok(false);
    }
    let q = layout.entries[row].tag;
    let k = layout.entries[col].tag;
    if q == Tag::Pad || k == Tag::Pad {
        return Ok(false);
    }
    let q_is_target = matches!(q, Tag::Target | Tag::Role(Role::Assistant));
    let k_is_target = matches!(k, Tag::Target | Tag::Role(Role::Assistant));
    if !q_is_target {
        return Ok(!k_is_target || options.source_sees_targets);
    }
    if k_is_target {
        return Ok(true);
    }
    if k == Tag::Prompt {
        return Ok(true);
    }
    // Which target does this row help predict?
    let emitted = layout.entries[..=row].iter().filter(|e| e.tag == Tag::Target).count();
    let j = (emitted + 1).min(g.len());
    let budget = if j == 0 { 0 } else { g[j - 1] };
    // Sources strictly before the key, plus itself if it is one.
    let before = layout.entries[..col].iter().filter(|e| e.tag == Tag::Source).count();
    let needed = before + 1;
    Ok(needed <= budget)
}
