use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::RESERVED;
use super::{ParallelCorpus, SentencePair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    ReverseCopy,
    LexiconTranslate,
}

/// Sentence lengths: uniform on `[min, max]`, except that a `tail` fraction
/// of samples is drawn uniformly from `[max, tail_factor·max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthLaw {
    pub min: usize,
    pub max: usize,
    #[serde(default)]
    pub tail: f64,
    #[serde(default = "default_tail_factor")]
    pub tail_factor: usize,
}

fn default_tail_factor() -> usize {
    4
}

impl LengthLaw {
    pub fn uniform(min: usize, max: usize) -> Self {
        LengthLaw {
            min,
            max,
            tail: 0.0,
            tail_factor: default_tail_factor(),
        }
    }

    pub fn with_tail(mut self, tail: f64) -> Self {
        self.tail = tail;
        self
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        if self.tail > 0.0 && rng.random::<f64>() < self.tail {
            rng.random_range(self.max..=self.max * self.tail_factor)
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Parameters of a synthetic parallel task. `vocab_size` counts content tokens only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub lengths: LengthLaw,
    /// Reordering window for `lexicon_translate`.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Use the identity map instead of a random lexicon.
    #[serde(default)]
    pub identity_lexicon: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    1
}

impl SyntheticTaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, lengths: LengthLaw, seed: u64) -> Self {
        SyntheticTaskSpec {
            kind,
            vocab_size,
            lengths,
            window: default_window(),
            identity_lexicon: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.lengths;
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if l.min == 0 || l.min > l.max {
            return Err(Error::Config(format!("invalid length range [{}, {}]", l.min, l.max)));
        }
        if !(0.0..=1.0).contains(&l.tail) || l.tail_factor == 0 {
            return Err(Error::Config("tail must lie in [0, 1] with tail_factor ≥ 1".into()));
        }
        if self.kind == TaskKind::LexiconTranslate {
            if self.vocab_size < 2 && !self.identity_lexicon {
                return Err(Error::Config(format!(
                    "lexicon permutation needs at least 2 content tokens, got {}",
                    self.vocab_size
                )));
            }
            if self.window == 0 {
                return Err(Error::Config("reordering window must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// The content-token permutation used by `lexicon_translate`.
    pub fn lexicon(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.vocab_size as u32).map(|i| i + RESERVED as u32).collect();
        if !self.identity_lexicon {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX);
            ids.shuffle(&mut rng);
        }
        ids
    }

    /// Pair number `index`, a pure function of the spec and the index.
    pub fn pair(&self, index: u64, lexicon: &[u32]) -> SentencePair {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let len = self.lengths.sample(&mut rng);
        let src: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..self.vocab_size as u32) + RESERVED as u32)
            .collect();
        let tgt = match self.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::ReverseCopy => src.iter().rev().copied().collect(),
            TaskKind::LexiconTranslate => {
                let mapped: Vec<u32> = src.iter().map(|&t| lexicon[t as usize - RESERVED]).collect();
                reorder_windows(&mapped, self.window)
            }
        };
        SentencePair { src, tgt }
    }
}

/// Reverses each consecutive run of `window` tokens (the last run may be shorter).
pub fn reorder_windows(tokens: &[u32], window: usize) -> Vec<u32> {
    tokens
        .chunks(window.max(1))
        .flat_map(|c| c.iter().rev().copied())
        .collect()
}

/// Pairs `start .. start + n` of the task.
pub fn generate_range(spec: &SyntheticTaskSpec, start: u64, n: usize) -> Result<ParallelCorpus> {
    spec.validate()?;
    let lexicon = spec.lexicon();
    Ok(ParallelCorpus {
        pairs: (0..n as u64).map(|i| spec.pair(start + i, &lexicon)).collect(),
    })
}

pub fn generate(spec: &SyntheticTaskSpec, n: usize) -> Result<ParallelCorpus> {
    if n == 0 {
        return Err(Error::Argument("corpus size must be at least 1".into()));
    }
    generate_range(spec, 0, n)
}
