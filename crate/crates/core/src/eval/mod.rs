//! Decoding, BLEU, length-bucketed reports and paired bootstrap tests.

mod bleu;
mod decode;

pub use bleu::{corpus_bleu, sentence_stats, tokenize_13a, BleuScore, BleuStats, MAX_ORDER};
pub use decode::{
    beam_decode, decode, decode_all, greedy_decode, max_decode_len, with_threads, DecodeConfig, Hypothesis,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bucket_of, is_special, LengthBuckets, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::FrozenModel;

/// Which side's length assigns a sentence to a bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketBy {
    Reference,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    /// Inclusive length range such as `[18,29]`.
    pub range: String,
    pub count: usize,
    /// `None` for an empty bucket.
    pub bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub overall: f64,
    pub buckets: Vec<BucketResult>,
    pub decode: DecodeConfig,
}

/// Space-joined ids of the non-special tokens.
pub fn ids_to_line(ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&t| !is_special(t))
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores `hyps` against `refs` overall and per bucket of `lengths`.
pub fn bucket_report<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    lengths: &[usize],
    buckets: &LengthBuckets,
    decode: DecodeConfig,
) -> Result<BucketReport> {
    if lengths.len() != hyps.len() {
        return Err(Error::Argument("one length per sentence required".into()));
    }
    let stats = sentence_stats(hyps, refs)?;
    let mut overall = BleuStats::default();
    let mut per = vec![(BleuStats::default(), 0usize, 0usize); buckets.len()];
    for (s, &len) in stats.iter().zip(lengths) {
        overall.add(s);
        let b = &mut per[bucket_of(buckets, len)];
        b.0.add(s);
        b.1 += 1;
        b.2 = b.2.max(len);
    }
    if hyps.is_empty() {
        return Err(Error::Argument("BLEU of an empty corpus".into()));
    }
    let buckets = per
        .iter()
        .enumerate()
        .map(|(i, (s, count, longest))| {
            let (lo, hi) = buckets.range(i);
            let range = match hi {
                Some(hi) => format!("[{lo},{}]", hi - 1),
                None if *count > 0 => format!("[{lo},{longest}]"),
                None => format!("[{lo},∞)"),
            };
            BucketResult {
                range,
                count: *count,
                bleu: (*count > 0).then(|| s.score().score),
            }
        })
        .collect();
    Ok(BucketReport {
        overall: overall.score().score,
        buckets,
        decode,
    })
}

/// Decodes `corpus` and reports BLEU per length bucket. Returns the report
/// and the decoded token ids.
pub fn evaluate_buckets(
    model: &FrozenModel,
    corpus: &ParallelCorpus,
    buckets: &LengthBuckets,
    bucket_by: BucketBy,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<(BucketReport, Vec<Vec<u32>>)> {
    let sources: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| model.model().prepare_source(&p.src)).collect();
    let outputs = decode_all(model, &sources, decode, threads)?;
    let hyps: Vec<String> = outputs.iter().map(|h| ids_to_line(h)).collect();
    let refs: Vec<String> = corpus.pairs.iter().map(|p| ids_to_line(&p.tgt)).collect();
    let lengths: Vec<usize> = corpus
        .pairs
        .iter()
        .map(|p| match bucket_by {
            BucketBy::Reference => p.tgt.len(),
            BucketBy::Source => p.src.len(),
        })
        .collect();
    let report = bucket_report(&hyps, &refs, &lengths, buckets, *decode)?;
    Ok((report, outputs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub resamples: usize,
    pub significant: bool,
}

pub const MIN_RESAMPLES: usize = 100;

/// One-sided paired bootstrap: is system A better than system B?
///
/// `p` is the share of resamples in which B scores at least as well as A,
/// with exact ties counted as one half.
pub fn paired_bootstrap<S: AsRef<str>>(
    hyps_a: &[S],
    hyps_b: &[S],
    refs: &[S],
    resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if hyps_a.len() != refs.len() || hyps_b.len() != refs.len() {
        return Err(Error::Argument(format!(
            "misaligned inputs: {} / {} hypotheses for {} references",
            hyps_a.len(),
            hyps_b.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Argument("bootstrap over an empty corpus".into()));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::Argument(format!("at least {MIN_RESAMPLES} resamples required")));
    }
    let a = sentence_stats(hyps_a, refs)?;
    let b = sentence_stats(hyps_b, refs)?;
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = 0.0f64;
    for _ in 0..resamples {
        let (mut sa, mut sb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa.add(&a[i]);
            sb.add(&b[i]);
        }
        let (ba, bb) = (sa.score().score, sb.score().score);
        if bb > ba {
            losses += 1.0;
        } else if bb == ba {
            losses += 0.5;
        }
    }
    let p_value = losses / resamples as f64;
    Ok(SignificanceResult {
        p_value,
        resamples,
        significant: p_value < 0.05,
    })
}
