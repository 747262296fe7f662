use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, PAD, SEP};
use super::ParallelCorpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One stream `[BOS src EOS SEP tgt EOS]`.
    DecoderOnly,
    /// Source `[src EOS]`, target input `[BOS tgt]`, target output `[tgt EOS]`.
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    /// Upper bound on `rows × padded length` per batch.
    pub max_tokens: usize,
    pub mode: BatchMode,
}

/// Right-padded id matrix with per-row valid lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl TokenGrid {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, width - r.len()));
        }
        TokenGrid {
            rows: rows.len(),
            width,
            ids,
            lengths: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    /// `true` on non-padding cells.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &l in &self.lengths {
            m.extend((0..self.width).map(|t| t < l));
        }
        m
    }
}

/// A padded training batch. `input`, `target`, `loss_mask` and `ae_mask`
/// are aligned cell by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// Corpus indices of the rows.
    pub indices: Vec<usize>,
    /// Encoder input, absent in decoder-only mode.
    pub source: Option<TokenGrid>,
    pub input: TokenGrid,
    pub target: Vec<u32>,
    /// Cells scored by the translation loss.
    pub loss_mask: Vec<bool>,
    /// Cells predicting source tokens (decoder-only mode).
    pub ae_mask: Vec<bool>,
    /// Position of SEP in each input row (decoder-only mode).
    pub sep_positions: Vec<usize>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.input.rows
    }

    pub fn mode(&self) -> BatchMode {
        if self.source.is_some() {
            BatchMode::EncoderDecoder
        } else {
            BatchMode::DecoderOnly
        }
    }

    /// Number of scored target cells.
    pub fn target_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Padded cell count, the quantity bounded by the token budget.
    pub fn padded_tokens(&self) -> usize {
        let src = self.source.as_ref().map_or(0, |s| s.rows * s.width);
        src + self.input.rows * (self.input.width + 1)
    }

    /// Builds one batch from `pairs` of `(src, tgt)`.
    pub fn build(pairs: &[(&[u32], &[u32])], indices: Vec<usize>, mode: BatchMode) -> Self {
        match mode {
            BatchMode::DecoderOnly => {
                let mut inputs = Vec::with_capacity(pairs.len());
                let mut targets = Vec::with_capacity(pairs.len());
                let mut seps = Vec::with_capacity(pairs.len());
                for (src, tgt) in pairs {
                    let mut seq = Vec::with_capacity(src.len() + tgt.len() + 4);
                    seq.push(BOS);
                    seq.extend_from_slice(src);
                    seq.extend([EOS, SEP]);
                    seq.extend_from_slice(tgt);
                    seq.push(EOS);
                    seps.push(src.len() + 2);
                    targets.push(seq[1..].to_vec());
                    seq.pop();
                    inputs.push(seq);
                }
                let input = TokenGrid::from_rows(&inputs);
                let w = input.width;
                let mut target = vec![PAD; input.rows * w];
                let mut loss_mask = vec![false; input.rows * w];
                let mut ae_mask = vec![false; input.rows * w];
                for (r, t) in targets.iter().enumerate() {
                    target[r * w..r * w + t.len()].copy_from_slice(t);
                    let n = pairs[r].0.len();
                    for c in 0..n {
                        ae_mask[r * w + c] = true;
                    }
                    for c in seps[r]..t.len() {
                        loss_mask[r * w + c] = true;
                    }
                }
                SequenceBatch {
                    indices,
                    source: None,
                    input,
                    target,
                    loss_mask,
                    ae_mask,
                    sep_positions: seps,
                }
            }
            BatchMode::EncoderDecoder => {
                let srcs: Vec<Vec<u32>> = pairs
                    .iter()
                    .map(|(s, _)| s.iter().copied().chain([EOS]).collect())
                    .collect();
                let tin: Vec<Vec<u32>> = pairs
                    .iter()
                    .map(|(_, t)| [BOS].into_iter().chain(t.iter().copied()).collect())
                    .collect();
                let input = TokenGrid::from_rows(&tin);
                let w = input.width;
                let mut target = vec![PAD; input.rows * w];
                let mut loss_mask = vec![false; input.rows * w];
                for (r, (_, t)) in pairs.iter().enumerate() {
                    for (c, &tok) in t.iter().chain([EOS].iter()).enumerate() {
                        target[r * w + c] = tok;
                        loss_mask[r * w + c] = true;
                    }
                }
                SequenceBatch {
                    indices,
                    source: Some(TokenGrid::from_rows(&srcs)),
                    ae_mask: vec![false; loss_mask.len()],
                    input,
                    target,
                    loss_mask,
                    sep_positions: Vec::new(),
                }
            }
        }
    }
}

fn padded_len(src: usize, tgt: usize, mode: BatchMode) -> usize {
    match mode {
        BatchMode::DecoderOnly => src + tgt + 4,
        BatchMode::EncoderDecoder => src + 1 + tgt + 2,
    }
}

/// Length-grouped batches of one corpus.
#[derive(Clone, Debug)]
pub struct Batches {
    pub batches: Vec<SequenceBatch>,
    /// Sentences dropped for exceeding the token budget.
    pub skipped: usize,
}

impl Batches {
    /// Batch order for one epoch, shuffled deterministically by `seed`.
    pub fn epoch_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

/// Sorts sentences by length and packs them greedily into batches whose
/// padded size stays within `cfg.max_tokens`.
pub fn make_batches(corpus: &ParallelCorpus, cfg: &BatchConfig) -> Result<Batches> {
    if cfg.max_tokens == 0 {
        return Err(Error::Config("max_tokens must be positive".into()));
    }
    let lens: Vec<usize> = corpus
        .pairs
        .iter()
        .map(|p| padded_len(p.src.len(), p.tgt.len(), cfg.mode))
        .collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (lens[i], corpus.pairs[i].src.len(), i));
    let mut batches = Vec::new();
    let mut skipped = 0;
    let mut current: Vec<usize> = Vec::new();
    let mut flush = |current: &mut Vec<usize>| {
        if current.is_empty() {
            return;
        }
        let pairs: Vec<(&[u32], &[u32])> = current
            .iter()
            .map(|&i| (corpus.pairs[i].src.as_slice(), corpus.pairs[i].tgt.as_slice()))
            .collect();
        batches.push(SequenceBatch::build(&pairs, std::mem::take(current), cfg.mode));
    };
    for i in order {
        if lens[i] > cfg.max_tokens {
            skipped += 1;
            continue;
        }
        let width = match cfg.mode {
            BatchMode::DecoderOnly => current.iter().map(|&j| lens[j]).max().unwrap_or(0).max(lens[i]),
            BatchMode::EncoderDecoder => {
                let longest = |side: fn(&super::SentencePair) -> usize| {
                    current.iter().map(|&j| side(&corpus.pairs[j])).max().unwrap_or(0).max(side(&corpus.pairs[i]))
                };
                padded_len(longest(|p| p.src.len()), longest(|p| p.tgt.len()), cfg.mode)
            }
        };
        if (current.len() + 1) * width > cfg.max_tokens {
            flush(&mut current);
        }
        current.push(i);
    }
    flush(&mut current);
    Ok(Batches { batches, skipped })
}
