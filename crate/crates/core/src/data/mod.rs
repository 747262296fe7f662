//! Synthetic parallel corpora, vocabularies, batching and length buckets.

mod batch;
mod synthetic;
mod vocab;

pub use batch::{make_batches, BatchConfig, BatchMode, Batches, SequenceBatch, TokenGrid};
pub use synthetic::{
    generate, generate_range, reorder_windows, LengthLaw, SyntheticTaskSpec, TaskKind,
};
pub use vocab::{is_special, Vocabulary, BOS, EOS, PAD, RESERVED, SEP, UNK};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One aligned sentence pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|p| p.src.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|p| p.tgt.as_slice())
    }

    /// Writes `<name>.src` and `<name>.tgt`, one sentence per line.
    pub fn write(&self, dir: &Path, name: &str, vocab: &Vocabulary) -> Result<()> {
        let render = |side: &mut dyn Iterator<Item = &[u32]>| {
            let mut s = String::new();
            for ids in side {
                s.push_str(&vocab.decode(ids));
                s.push('\n');
            }
            s
        };
        std::fs::write(dir.join(format!("{name}.src")), render(&mut self.sources()))?;
        std::fs::write(dir.join(format!("{name}.tgt")), render(&mut self.targets()))?;
        Ok(())
    }

    pub fn read(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Self> {
        let src = std::fs::read_to_string(dir.join(format!("{name}.src")))?;
        let tgt = std::fs::read_to_string(dir.join(format!("{name}.tgt")))?;
        let (src, tgt): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
        if src.len() != tgt.len() {
            return Err(Error::Format(format!(
                "{name}: {} source lines but {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            let pair = SentencePair {
                src: vocab.encode(s),
                tgt: vocab.encode(t),
            };
            if pair.src.is_empty() || pair.tgt.is_empty() {
                return Err(Error::Format(format!("{name}: empty sentence on line {}", i + 1)));
            }
            pairs.push(pair);
        }
        Ok(ParallelCorpus { pairs })
    }
}

/// Reverses every source sentence; targets are untouched.
pub fn reverse_source(corpus: &ParallelCorpus) -> ParallelCorpus {
    ParallelCorpus {
        pairs: corpus
            .pairs
            .iter()
            .map(|p| SentencePair {
                src: p.src.iter().rev().copied().collect(),
                tgt: p.tgt.clone(),
            })
            .collect(),
    }
}

/// Half-open length ranges `[1, b0), [b0, b1), …, [b_last, ∞)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBuckets {
    boundaries: Vec<usize>,
}

impl Default for LengthBuckets {
    fn default() -> Self {
        LengthBuckets {
            boundaries: vec![18, 30],
        }
    }
}

impl LengthBuckets {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.first() == Some(&0) || boundaries.first() == Some(&1) {
            return Err(Error::Config("bucket boundaries must exceed 1".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("bucket boundaries must increase: {boundaries:?}")));
        }
        Ok(LengthBuckets { boundaries })
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Inclusive lower bound and exclusive upper bound of bucket `i`.
    pub fn range(&self, i: usize) -> (usize, Option<usize>) {
        let lo = if i == 0 { 1 } else { self.boundaries[i - 1] };
        (lo, self.boundaries.get(i).copied())
    }
}

impl fmt::Display for LengthBuckets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.boundaries.iter().map(|b| b.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn bucket_of(buckets: &LengthBuckets, length: usize) -> usize {
    buckets.boundaries.iter().take_while(|&&b| b <= length).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_validation() {
        assert!(LengthBuckets::new(vec![30, 18]).is_err());
        assert!(LengthBuckets::new(vec![1]).is_err());
        let b = LengthBuckets::new(vec![]).unwrap();
        assert_eq!(bucket_of(&b, 500), 0);
        assert_eq!(LengthBuckets::default().range(2), (30, None));
    }
}
