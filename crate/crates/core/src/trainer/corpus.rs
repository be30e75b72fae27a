//! Synthetic parallel corpora over integer vocabularies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{special, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Target is a fixed token-wise bijection of the source.
    CopyMap,
    /// The bijection, then a random permutation inside consecutive windows.
    LocalReorder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusSpec {
    pub task: Task,
    pub src_len_min: usize,
    pub src_len_max: usize,
    pub vocab_size: usize,
    pub reorder_window: usize,
    pub seed: u64,
    pub size: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            task: Task::CopyMap,
            src_len_min: 12,
            src_len_max: 28,
            vocab_size: 64,
            reorder_window: 3,
            seed: 0,
            size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= special::FIRST_CONTENT as usize + 1 {
            return Err(Error::Invalid(format!(
                "corpus vocab_size {} leaves fewer than two content tokens",
                self.vocab_size
            )));
        }
        if self.src_len_min == 0 || self.src_len_min > self.src_len_max {
            return Err(Error::Invalid(format!(
                "bad source length bounds [{}, {}]",
                self.src_len_min, self.src_len_max
            )));
        }
        if self.size == 0 {
            return Err(Error::Invalid("corpus size must be at least 1".into()));
        }
        if self.reorder_window == 0 {
            return Err(Error::Invalid("reorder window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ToyCorpus> {
        self.validate()?;
        let content: Vec<TokenId> = (special::FIRST_CONTENT..self.vocab_size as TokenId).collect();
        let mut image = content.clone();
        image.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d61_7070));
        let mut map = vec![0; self.vocab_size];
        for (&from, &to) in content.iter().zip(&image) {
            map[from as usize] = to;
        }
        Ok(ToyCorpus {
            spec: self.clone(),
            map,
        })
    }
}

/// A corpus spec with its bijection materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    map: Vec<TokenId>,
}

impl ToyCorpus {
    pub fn map(&self, token: TokenId) -> TokenId {
        self.map[token as usize]
    }

    /// Pair `index`; any index is valid, the first `spec.size` form the
    /// training split.
    pub fn pair(&self, index: usize) -> Pair {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(index as u64 + 1);
        let len = rng.random_range(s.src_len_min..=s.src_len_max);
        let source: Vec<TokenId> = (0..len)
            .map(|_| rng.random_range(special::FIRST_CONTENT..s.vocab_size as TokenId))
            .collect();
        let mut target: Vec<TokenId> = source.iter().map(|&t| self.map(t)).collect();
        if s.task == Task::LocalReorder {
            for window in target.chunks_mut(s.reorder_window) {
                window.shuffle(&mut rng);
            }
        }
        Pair { source, target }
    }

    pub fn pairs(&self, range: std::ops::Range<usize>) -> Vec<Pair> {
        range.into_par_iter().map(|i| self.pair(i)).collect()
    }

    pub fn training_pairs(&self) -> Vec<Pair> {
        self.pairs(0..self.spec.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_index_deterministic() {
        let c = ToyCorpusSpec::default().build().unwrap();
        assert_eq!(c.pair(17), c.pair(17));
        assert_ne!(c.pair(17), c.pair(18));
        assert_eq!(c.pairs(10..13)[2], c.pair(12));
    }

    #[test]
    fn copy_map_is_a_bijection_of_content() {
        let c = ToyCorpusSpec::default().build().unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in special::FIRST_CONTENT..64 {
            let m = c.map(t);
            assert!((special::FIRST_CONTENT..64).contains(&m));
            assert!(seen.insert(m));
        }
        for p in c.pairs(0..50) {
            assert!((12..=28).contains(&p.source.len()));
            let mapped: Vec<_> = p.source.iter().map(|&t| c.map(t)).collect();
            assert_eq!(p.target, mapped);
        }
    }

    #[test]
    fn local_reorder_permutes_within_windows() {
        let spec = ToyCorpusSpec {
            task: Task::LocalReorder,
            reorder_window: 4,
            ..ToyCorpusSpec::default()
        };
        let c = spec.build().unwrap();
        let mut moved = false;
        for p in c.pairs(0..40) {
            let mapped: Vec<_> = p.source.iter().map(|&t| c.map(t)).collect();
            for (a, b) in mapped.chunks(4).zip(p.target.chunks(4)) {
                let (mut a, mut b) = (a.to_vec(), b.to_vec());
                moved |= a != b;
                a.sort();
                b.sort();
                assert_eq!(a, b);
            }
        }
        assert!(moved);
    }

    #[test]
    fn bad_specs_are_rejected() {
        for spec in [
            ToyCorpusSpec {
                vocab_size: 7,
                ..Default::default()
            },
            ToyCorpusSpec {
                src_len_min: 0,
                ..Default::default()
            },
            ToyCorpusSpec {
                src_len_min: 9,
                src_len_max: 8,
                ..Default::default()
            },
            ToyCorpusSpec {
                size: 0,
                ..Default::default()
            },
        ] {
            assert!(spec.build().is_err());
        }
    }
}
