//! Greedy and beam-search decoding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EOS;
use crate::error::{Error, Result};
use crate::model::FrozenModel;

/// Beam width and length penalty `score / len^alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 4, alpha: 0.6 }
    }
}

/// A finished hypothesis; `tokens` excludes the final EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    pub normalized: f64,
}

/// `2·|source| + 10`.
pub fn max_decode_len(source_len: usize) -> usize {
    2 * source_len + 10
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let z = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - z).collect()
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn greedy_decode(model: &FrozenModel, source: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let (mut session, mut logits) = model.start(source)?;
    let mut out = Vec::new();
    for t in 0..max_len {
        let tok = argmax(&logits);
        if tok == EOS {
            break;
        }
        out.push(tok);
        if t + 1 < max_len {
            logits = session.step(&[tok])?;
        }
    }
    Ok(out)
}

pub fn beam_decode(model: &FrozenModel, source: &[u32], cfg: &DecodeConfig, max_len: usize) -> Result<Hypothesis> {
    if cfg.beam < 1 {
        return Err(Error::Argument("beam size must be at least 1".into()));
    }
    let norm = |lp: f64, len: usize| lp / (len.max(1) as f64).powf(cfg.alpha);
    let (mut session, mut logits) = model.start(source)?;
    let vocab = logits.len();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (r, (_, score)) in live.iter().enumerate() {
            let lp = log_softmax(&logits[r * vocab..(r + 1) * vocab]);
            cands.extend(lp.iter().enumerate().map(|(v, &l)| (score + l, r, v as u32)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<(Vec<u32>, f64)> = Vec::with_capacity(cfg.beam);
        let mut parents = Vec::with_capacity(cfg.beam);
        for &(score, r, v) in cands.iter().take(2 * cfg.beam) {
            if v == EOS {
                if finished.len() < cfg.beam {
                    finished.push(Hypothesis {
                        tokens: live[r].0.clone(),
                        log_prob: score,
                        normalized: norm(score, t + 1),
                    });
                }
            } else if next.len() < cfg.beam {
                let mut toks = live[r].0.clone();
                toks.push(v);
                next.push((toks, score));
                parents.push(r);
            }
        }
        if finished.len() >= cfg.beam || next.is_empty() {
            live.clear();
            break;
        }
        live = next;
        if t + 1 == max_len {
            break;
        }
        session.select(&parents);
        let toks: Vec<u32> = live.iter().map(|(t, _)| *t.last().unwrap()).collect();
        logits = session.step(&toks)?;
    }
    for (tokens, score) in live {
        let len = tokens.len();
        finished.push(Hypothesis {
            tokens,
            log_prob: score,
            normalized: norm(score, len),
        });
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.normalized > best.normalized { h } else { best })
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Decodes one sentence with the configured beam (beam 1 is greedy).
pub fn decode(model: &FrozenModel, source: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>> {
    let max_len = max_decode_len(source.len());
    if cfg.beam == 1 {
        greedy_decode(model, source, max_len)
    } else {
        Ok(beam_decode(model, source, cfg, max_len)?.tokens)
    }
}

/// Runs `f` on a pool of `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Decodes every source; output order follows input order for any thread count.
pub fn decode_all(model: &FrozenModel, sources: &[Vec<u32>], cfg: &DecodeConfig, threads: usize) -> Result<Vec<Vec<u32>>> {
    if cfg.beam < 1 {
        return Err(Error::Argument("beam size must be at least 1".into()));
    }
    with_threads(threads, || sources.par_iter().map(|s| decode(model, s, cfg)).collect())?
}
