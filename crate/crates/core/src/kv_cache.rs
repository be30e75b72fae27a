//! Per-layer key/value storage annotated with the position each entry was
//! encoded at.
//!
//! Under rotary embeddings the stored keys are already rotated, so an entry's
//! positional information is frozen at append time. Under ALiBi (and no
//! positional scheme) keys are raw and the bias is derived from the stored
//! position ids when attention is computed.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::layout::LayoutPlan;
use crate::masking::MaskMatrix;
use crate::model::{ForwardInput, Transformer, Visibility};
use crate::scalar::Scalar;
use crate::tokens::{PositionId, Tag, TokenId};

static NEXT_CACHE_ID: AtomicU64 = AtomicU64::new(1);

/// Keys, values and metadata produced by one forward call, not yet stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheDelta<F> {
    /// Per layer, `[entries x d_model]` (heads are contiguous blocks).
    pub keys: Vec<Vec<F>>,
    pub values: Vec<Vec<F>>,
    pub positions: Vec<PositionId>,
    pub tags: Vec<Tag>,
}

impl<F> CacheDelta<F> {
    pub fn empty(n_layers: usize) -> Self {
        Self {
            keys: (0..n_layers).map(|_| Vec::new()).collect(),
            values: (0..n_layers).map(|_| Vec::new()).collect(),
            positions: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }
}

/// Opaque length marker for [`KvCache::rollback`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheMark {
    cache_id: u64,
    len: usize,
    epoch: u64,
}

impl CacheMark {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<F> {
    id: u64,
    width: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    positions: Vec<PositionId>,
    tags: Vec<Tag>,
    epoch: u64,
    /// `(epoch, len)` of every rollback, used to detect stale marks.
    rollbacks: Vec<(u64, usize)>,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            id: NEXT_CACHE_ID.fetch_add(1, Ordering::Relaxed),
            width: d_model,
            keys: (0..n_layers).map(|_| Vec::new()).collect(),
            values: (0..n_layers).map(|_| Vec::new()).collect(),
            positions: Vec::new(),
            tags: Vec::new(),
            epoch: 0,
            rollbacks: Vec::new(),
        }
    }

    pub fn for_model(model: &Transformer<F>) -> Self {
        Self::new(model.config.n_layers, model.config.d_model)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> &[PositionId] {
        &self.positions
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn layer_keys(&self, layer: usize) -> &[F] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[F] {
        &self.values[layer]
    }

    /// Key row of one entry in one layer.
    pub fn key(&self, layer: usize, entry: usize) -> &[F] {
        &self.keys[layer][entry * self.width..(entry + 1) * self.width]
    }

    pub fn value(&self, layer: usize, entry: usize) -> &[F] {
        &self.values[layer][entry * self.width..(entry + 1) * self.width]
    }

    pub fn append(&mut self, delta: CacheDelta<F>) -> Result<()> {
        if delta.n_layers() != self.n_layers() {
            return Err(Error::Cache(format!(
                "delta has {} layers, cache has {}",
                delta.n_layers(),
                self.n_layers()
            )));
        }
        let n = delta.len();
        if delta.tags.len() != n {
            return Err(Error::Cache(format!(
                "delta has {} positions but {} tags",
                n,
                delta.tags.len()
            )));
        }
        for (l, (k, v)) in delta.keys.iter().zip(&delta.values).enumerate() {
            if k.len() != n * self.width || v.len() != n * self.width {
                return Err(Error::Cache(format!(
                    "layer {l} delta holds {} key / {} value scalars, expected {}",
                    k.len(),
                    v.len(),
                    n * self.width
                )));
            }
        }
        if n == 0 {
            return Ok(());
        }
        for (l, (k, v)) in delta.keys.into_iter().zip(delta.values).enumerate() {
            self.keys[l].extend(k);
            self.values[l].extend(v);
        }
        self.positions.extend(delta.positions);
        self.tags.extend(delta.tags);
        self.epoch += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> CacheMark {
        CacheMark {
            cache_id: self.id,
            len: self.len(),
            epoch: self.epoch,
        }
    }

    /// Mark for the current prefix of length `len`.
    pub fn mark_at(&self, len: usize) -> Result<CacheMark> {
        if len > self.len() {
            return Err(Error::Cache(format!(
                "cannot mark length {len} in a cache of {}",
                self.len()
            )));
        }
        Ok(CacheMark { len, ..self.snapshot() })
    }

    /// Truncates every layer back to the marked length.
    pub fn rollback(&mut self, mark: CacheMark) -> Result<()> {
        if mark.cache_id != self.id {
            return Err(Error::Cache("mark was taken from a different cache".into()));
        }
        if mark.len > self.len() {
            return Err(Error::Cache(format!(
                "stale mark: length {} but cache holds {}",
                mark.len,
                self.len()
            )));
        }
        let truncated_below = self
            .rollbacks
            .iter()
            .any(|&(epoch, len)| epoch >= mark.epoch && len < mark.len);
        if truncated_below {
            return Err(Error::Cache(
                "stale mark: cache was rolled back past it after it was taken".into(),
            ));
        }
        let w = self.width;
        for l in 0..self.n_layers() {
            self.keys[l].truncate(mark.len * w);
            self.values[l].truncate(mark.len * w);
        }
        self.positions.truncate(mark.len);
        self.tags.truncate(mark.len);
        self.rollbacks.push((self.epoch, mark.len));
        self.epoch += 1;
        Ok(())
    }

    /// Rebuilds the cache from scratch with one forward pass over `layout`.
    /// Causal visibility unless `mask` is given. Returns the analytic FLOPs charged.
    pub fn recompute_from(
        &mut self,
        layout: &LayoutPlan,
        model: &Transformer<F>,
        mask: Option<&MaskMatrix>,
    ) -> Result<f64> {
        let tokens: Vec<TokenId> = layout.entries.iter().map(|e| e.token).collect();
        let positions: Vec<PositionId> = layout.entries.iter().map(|e| e.position).collect();
        let tags: Vec<Tag> = layout.entries.iter().map(|e| e.tag).collect();
        let visibility = match mask {
            Some(m) => Visibility::Mask(m),
            None => Visibility::CausalOverCache,
        };
        let out = model.forward(&ForwardInput::new(&tokens, &positions, &tags).visibility(visibility))?;
        let mark = CacheMark {
            cache_id: self.id,
            len: 0,
            epoch: self.epoch,
        };
        self.rollback(mark)?;
        self.append(out.delta)?;
        Ok(crate::metrics::FlopsModel::new(&model.config).flops_forward(0, tokens.len()))
    }

    /// Text table `index tag position key_norm[layer]...` for golden tests.
    pub fn debug_dump(&self) -> String {
        let mut s = String::from("index\ttag\tposition");
        for l in 0..self.n_layers() {
            let _ = write!(s, "\tkey_norm_l{l}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let _ = write!(s, "{i}\t{}\t{}", self.tags[i], self.positions[i]);
            for l in 0..self.n_layers() {
                let k = self.key(l, i);
                let n: f64 = k.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
                let _ = write!(s, "\t{n:.6}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(n_layers: usize, width: usize, positions: &[usize], seed: f64) -> CacheDelta<f64> {
        let n = positions.len();
        let mk = |off: f64| -> Vec<Vec<f64>> {
            (0..n_layers)
                .map(|l| (0..n * width).map(|i| seed + off + (l * 1000 + i) as f64).collect())
                .collect()
        };
        CacheDelta {
            keys: mk(0.0),
            values: mk(0.5),
            positions: positions.to_vec(),
            tags: vec![Tag::Source; n],
        }
    }

    #[test]
    fn empty_append_is_noop() {
        let mut c = KvCache::<f64>::new(2, 4);
        c.append(delta(2, 4, &[0, 1], 0.0)).unwrap();
        let before = c.clone();
        c.append(CacheDelta::empty(2)).unwrap();
        assert_eq!(c.positions(), before.positions());
        assert_eq!(c.layer_keys(1), before.layer_keys(1));
    }

    #[test]
    fn append_grows_by_delta_len() {
        let mut c = KvCache::<f64>::new(3, 2);
        c.append(delta(3, 2, &[0, 1, 2], 0.0)).unwrap();
        c.append(delta(3, 2, &[5, 6], 1.0)).unwrap();
        assert_eq!(c.len(), 5);
        for l in 0..3 {
            assert_eq!(c.layer_keys(l).len(), 10);
            assert_eq!(c.layer_values(l).len(), 10);
        }
        assert_eq!(c.positions(), &[0, 1, 2, 5, 6]);
    }

    #[test]
    fn layer_mismatch_is_rejected() {
        let mut c = KvCache::<f64>::new(2, 4);
        assert!(c.append(delta(3, 4, &[0], 0.0)).is_err());
    }

    #[test]
    fn rollback_restores_pre_append_state() {
        let mut c = KvCache::<f64>::new(2, 4);
        c.append(delta(2, 4, &[0, 1], 0.0)).unwrap();
        let reference = c.clone();
        let mark = c.snapshot();
        c.append(delta(2, 4, &[2, 3, 4], 9.0)).unwrap();
        c.rollback(mark).unwrap();
        assert_eq!(c.positions(), reference.positions());
        assert_eq!(c.tags(), reference.tags());
        for l in 0..2 {
            assert_eq!(c.layer_keys(l), reference.layer_keys(l));
            assert_eq!(c.layer_values(l), reference.layer_values(l));
        }
    }

    #[test]
    fn rollback_to_zero_empties() {
        let mut c = KvCache::<f64>::new(1, 2);
        let mark = c.snapshot();
        c.append(delta(1, 2, &[0, 1, 2], 0.0)).unwrap();
        c.rollback(mark).unwrap();
        assert!(c.is_empty());
        assert!(c.layer_keys(0).is_empty());
    }

    #[test]
    fn replayed_append_matches_single_append() {
        let d = delta(2, 4, &[3, 4], 7.0);
        let mut once = KvCache::<f64>::new(2, 4);
        once.append(d.clone()).unwrap();

        let mut replay = KvCache::<f64>::new(2, 4);
        let mark = replay.snapshot();
        replay.append(d.clone()).unwrap();
        replay.rollback(mark).unwrap();
        replay.append(d).unwrap();
        assert_eq!(replay.positions(), once.positions());
        assert_eq!(replay.layer_keys(0), once.layer_keys(0));
        assert_eq!(replay.layer_values(1), once.layer_values(1));
    }

    #[test]
    fn rollback_is_idempotent() {
        let mut c = KvCache::<f64>::new(1, 2);
        c.append(delta(1, 2, &[0], 0.0)).unwrap();
        let mark = c.snapshot();
        c.append(delta(1, 2, &[1, 2], 0.0)).unwrap();
        c.rollback(mark).unwrap();
        let once = c.clone();
        c.rollback(mark).unwrap();
        assert_eq!(c.positions(), once.positions());
        assert_eq!(c.layer_keys(0), once.layer_keys(0));
    }

    #[test]
    fn foreign_and_stale_marks_are_rejected() {
        let mut a = KvCache::<f64>::new(1, 2);
        let b = KvCache::<f64>::new(1, 2);
        assert!(a.rollback(b.snapshot()).is_err());

        a.append(delta(1, 2, &[0, 1], 0.0)).unwrap();
        let late = a.snapshot();
        a.rollback(CacheMark {
            cache_id: a.id,
            len: 1,
            epoch: a.epoch,
        })
        .unwrap();
        // `late` (length 2) is now past the end.
        assert!(a.rollback(late).is_err());
        // Re-growing past the old length does not revive it.
        a.append(delta(1, 2, &[7, 8], 0.0)).unwrap();
        assert!(a.rollback(late).is_err());
    }

    #[test]
    fn debug_dump_lists_every_entry() {
        let mut c = KvCache::<f64>::new(2, 2);
        c.append(delta(2, 2, &[4, 9], 0.0)).unwrap();
        let dump = c.debug_dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("index\ttag\tposition\tkey_norm_l0\tkey_norm_l1"));
        assert!(lines[2].starts_with("1\tsource\t9\t"));
    }
}
