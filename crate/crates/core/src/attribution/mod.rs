//! Masking-based dependency maps: how much does replacing one input token
//! with padding move the final decoder states of each target position?

mod export;

pub use export::{export_heatmap, metadata_path, read_csv, write_metadata, HeatmapFormat, HeatmapMetadata};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchMode, SequenceBatch, TokenGrid, PAD};
use crate::error::{Error, Result};
use crate::eval::with_threads;
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    Source,
    Target,
}

/// `rows` target positions × `cols` masked positions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub mode: AttributionMode,
    pub normalized: bool,
    /// Rows whose baseline state had zero norm (entries set to 0), or that
    /// were all zero when normalising.
    pub flagged_rows: Vec<usize>,
}

impl AttributionMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Scales each row to sum to one; all-zero rows stay zero and are flagged.
    pub fn normalize(&self) -> AttributionMap {
        let mut out = self.clone();
        out.normalized = true;
        for r in 0..self.rows {
            let row = &mut out.values[r * self.cols..(r + 1) * self.cols];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else if !out.flagged_rows.contains(&r) {
                out.flagged_rows.push(r);
            }
        }
        out.flagged_rows.sort_unstable();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessStats {
    /// Mean Shannon entropy (nats) of the normalised non-zero rows.
    pub mean_entropy: f64,
    /// Mean over rows of `max / mean`.
    pub max_over_mean: f64,
    /// Share of rows whose argmax is within ±1 of the expected column.
    pub alignment_rate: Option<f64>,
    /// Share of rows whose argmax is exactly the expected column.
    pub exact_alignment_rate: Option<f64>,
    pub rows_used: usize,
    pub zero_rows: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Entropy and peakedness of each row; `alignment[r]` is the expected
/// column of row `r` when known.
pub fn sharpness(map: &AttributionMap, alignment: Option<&[usize]>) -> Result<SharpnessStats> {
    if let Some(a) = alignment {
        if a.len() != map.rows {
            return Err(Error::Argument(format!("{} alignment points for {} rows", a.len(), map.rows)));
        }
    }
    let (mut entropy, mut peak, mut near, mut exact, mut used, mut zero) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
    for r in 0..map.rows {
        let row = map.row(r);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            zero += 1;
            continue;
        }
        used += 1;
        entropy -= row.iter().filter(|&&v| v > 0.0).map(|&v| (v / s) * (v / s).ln()).sum::<f64>();
        let max = row.iter().cloned().fold(0.0, f64::max);
        peak += max / (s / row.len() as f64);
        if let Some(a) = alignment {
            let am = argmax(row);
            near += (am.abs_diff(a[r]) <= 1) as usize;
            exact += (am == a[r]) as usize;
        }
    }
    let denom = used.max(1) as f64;
    Ok(SharpnessStats {
        mean_entropy: entropy / denom,
        max_over_mean: peak / denom,
        alignment_rate: alignment.map(|_| near as f64 / denom),
        exact_alignment_rate: alignment.map(|_| exact as f64 / denom),
        rows_used: used,
        zero_rows: zero,
    })
}

/// One sentence laid out as a model batch, with the cells that hold target
/// states and the cells that can be masked.
struct Layout {
    batch: SequenceBatch,
    /// Input cells whose decoder state produces target token `i`.
    state_cells: Vec<usize>,
}

fn layout(model: &Model, source: &[u32], target: &[u32]) -> Layout {
    let mode = model.config().batch_mode();
    let batch = SequenceBatch::build(&[(source, target)], vec![0], mode);
    let offset = match mode {
        BatchMode::DecoderOnly => source.len() + 2,
        BatchMode::EncoderDecoder => 0,
    };
    Layout {
        state_cells: (0..target.len()).map(|i| offset + i).collect(),
        batch,
    }
}

/// Decoder states `[rows, d]` at `cells` for each grid variant, computed in
/// fixed chunks so the result does not depend on the thread count.
fn states_for(
    model: &Model,
    variants: &[(Option<TokenGrid>, TokenGrid)],
    cells: &[usize],
    threads: usize,
) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 16;
    let d = model.config().d_model;
    let chunks: Vec<&[(Option<TokenGrid>, TokenGrid)]> = variants.chunks(CHUNK).collect();
    let results: Vec<Result<Vec<Vec<f32>>>> = with_threads(threads, || {
        chunks
            .par_iter()
            .map(|chunk| {
                let src = chunk[0].0.as_ref().map(|_| stack(chunk.iter().map(|v| v.0.as_ref().unwrap())));
                let input = stack(chunk.iter().map(|v| &v.1));
                let h = model.hidden_states(src.as_ref(), &input)?;
                let w = input.width;
                Ok((0..chunk.len())
                    .map(|r| {
                        cells
                            .iter()
                            .flat_map(|&c| h.data()[(r * w + c) * d..(r * w + c + 1) * d].iter().copied())
                            .collect()
                    })
                    .collect())
            })
            .collect()
    })?;
    let mut out = Vec::with_capacity(variants.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn stack<'a>(grids: impl Iterator<Item = &'a TokenGrid>) -> TokenGrid {
    let rows: Vec<Vec<u32>> = grids.map(|g| g.row(0).to_vec()).collect();
    TokenGrid::from_rows(&rows)
}

fn relative_change(base: &[f32], other: &[f32], d: usize, rows: usize) -> (Vec<f64>, Vec<bool>) {
    let mut out = Vec::with_capacity(rows);
    let mut zero = Vec::with_capacity(rows);
    for i in 0..rows {
        let b = &base[i * d..(i + 1) * d];
        let o = &other[i * d..(i + 1) * d];
        let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let diff = b.iter().zip(o).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt();
        zero.push(nb == 0.0);
        out.push(if nb == 0.0 { 0.0 } else { diff / nb });
    }
    (out, zero)
}

fn build_map(
    model: &Model,
    lay: &Layout,
    variants: Vec<(Option<TokenGrid>, TokenGrid)>,
    threads: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let d = model.config().d_model;
    let rows = lay.state_cells.len();
    let base_variant = [(lay.batch.source.clone(), lay.batch.input.clone())];
    let base = states_for(model, &base_variant, &lay.state_cells, threads)?.remove(0);
    let masked = states_for(model, &variants, &lay.state_cells, threads)?;
    let cols = variants.len();
    let mut values = vec![0.0; rows * cols];
    let mut flagged = Vec::new();
    for (c, h) in masked.iter().enumerate() {
        let (col, zero) = relative_change(&base, h, d, rows);
        for r in 0..rows {
            values[r * cols + c] = col[r];
            if zero[r] && !flagged.contains(&r) {
                flagged.push(r);
            }
        }
    }
    flagged.sort_unstable();
    Ok((values, flagged))
}

fn labels(tokens: &[u32], names: Option<&dyn Fn(u32) -> String>) -> Vec<String> {
    tokens
        .iter()
        .map(|&t| names.map_or_else(|| t.to_string(), |f| f(t)))
        .collect()
}

/// Influence of each source token on each forced target position.
pub fn source_attribution(
    model: &Model,
    source: &[u32],
    target: &[u32],
    threads: usize,
    names: Option<&dyn Fn(u32) -> String>,
) -> Result<AttributionMap> {
    check(source, target)?;
    let fed = model.prepare_source(source);
    let lay = layout(model, &fed, target);
    let n = source.len();
    // column j masks original position j, wherever the model sees it
    let at = |j: usize| if model.config().reverse_source { n - 1 - j } else { j };
    let variants = (0..n)
        .map(|j| match &lay.batch.source {
            Some(s) => {
                let mut s = s.clone();
                s.ids[at(j)] = PAD;
                (Some(s), lay.batch.input.clone())
            }
            None => {
                let mut i = lay.batch.input.clone();
                i.ids[1 + at(j)] = PAD;
                (None, i)
            }
        })
        .collect();
    let (values, flagged) = build_map(model, &lay, variants, threads)?;
    Ok(AttributionMap {
        rows: target.len(),
        cols: source.len(),
        values,
        row_labels: labels(target, names),
        col_labels: labels(source, names),
        mode: AttributionMode::Source,
        normalized: false,
        flagged_rows: flagged,
    })
}

/// Every entry of the target-side intervention matrix, upper triangle
/// included. Column 0 is the start symbol, column `j` the target token `j`.
pub fn target_changes(model: &Model, source: &[u32], target: &[u32], threads: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    check(source, target)?;
    let lay = layout(model, &model.prepare_source(source), target);
    let first = lay.state_cells[0];
    let variants = (0..target.len())
        .map(|j| {
            let mut i = lay.batch.input.clone();
            i.ids[first + j] = PAD;
            (lay.batch.source.clone(), i)
        })
        .collect();
    build_map(model, &lay, variants, threads)
}

/// Influence of each earlier target input on each forced target position.
/// Entries with masked position at or after the row's own input are zero.
pub fn target_attribution(
    model: &Model,
    source: &[u32],
    target: &[u32],
    threads: usize,
    names: Option<&dyn Fn(u32) -> String>,
) -> Result<AttributionMap> {
    let (mut values, flagged) = target_changes(model, source, target, threads)?;
    let m = target.len();
    for r in 0..m {
        for c in r + 1..m {
            values[r * m + c] = 0.0;
        }
    }
    let start = match model.config().batch_mode() {
        BatchMode::DecoderOnly => "<sep>",
        BatchMode::EncoderDecoder => "<s>",
    };
    let mut cols = vec![start.to_string()];
    cols.extend(labels(&target[..m - 1], names));
    Ok(AttributionMap {
        rows: m,
        cols: m,
        values,
        row_labels: labels(target, names),
        col_labels: cols,
        mode: AttributionMode::Target,
        normalized: false,
        flagged_rows: flagged,
    })
}

fn check(source: &[u32], target: &[u32]) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Argument("attribution needs a non-empty source and target".into()));
    }
    Ok(())
}
