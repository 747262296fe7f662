//! Corpus BLEU with exponential smoothing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Splits punctuation into separate tokens (digits keep `.` and `,` between
/// them) and collapses whitespace.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut spaced = String::with_capacity(line.len() + 8);
    for (i, &c) in chars.iter().enumerate() {
        let punct = c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace());
        let numeric = (c == '.' || c == ',')
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit();
        if punct && !numeric {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of one or more sentence pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let refs = ngrams(reference, n);
            let hyps = ngrams(hyp, n);
            s.total[n - 1] = hyp.len().saturating_sub(n - 1);
            s.correct[n - 1] = hyps.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> BleuScore {
        let mut precisions = [0.0f64; MAX_ORDER];
        let mut k = 1.0f64;
        for n in 0..MAX_ORDER {
            precisions[n] = if self.correct[n] > 0 {
                self.correct[n] as f64 / self.total[n] as f64
            } else {
                k *= 2.0;
                1.0 / (k * self.total[n].max(1) as f64)
            };
        }
        let (h, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if self.hyp_len == 0 {
            0.0
        } else if h < r {
            (1.0 - r / h).exp()
        } else {
            1.0
        };
        let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        BleuScore {
            score: (100.0 * bp * geo.exp()).clamp(0.0, 100.0),
            precisions,
            brevity_penalty: bp,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Statistics per sentence pair after tokenisation.
pub fn sentence_stats<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::sentence(&tokenize_13a(h.as_ref()), &tokenize_13a(r.as_ref())))
        .collect())
}

/// Corpus-level BLEU of detokenised lines against single references.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<BleuScore> {
    if hyps.is_empty() {
        return Err(Error::Argument("BLEU of an empty corpus".into()));
    }
    let mut total = BleuStats::default();
    for s in sentence_stats(hyps, refs)? {
        total.add(&s);
    }
    Ok(total.score())
}
