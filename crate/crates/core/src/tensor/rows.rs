//! Tape-free row kernels shared by the differentiable ops and frozen inference.

use super::kernels::gemm;
use super::nn::{gelu_scalar, sigmoid};

/// Epsilon used by every layer normalisation in the models.
pub const LN_EPS: f32 = 1e-5;

/// `x[rows, k] · w[k, n] + b`.
pub fn linear_rows(x: &[f32], k: usize, w: &[f32], n: usize, b: Option<&[f32]>) -> Vec<f32> {
    let rows = x.len() / k.max(1);
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, false, w, false, &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
    out
}

/// Per-row normalisation; returns the output and `(mean, 1/std)` per row.
pub fn layer_norm_rows(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> (Vec<f32>, Vec<[f64; 2]>) {
    let d = gain.len();
    let mut out = vec![0.0f32; x.len()];
    let mut stats = Vec::with_capacity(x.len() / d.max(1));
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().map(|&a| a as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            let xh = (row[j] as f64 - mean) * rstd;
            o[j] = (xh * gain[j] as f64 + bias[j] as f64) as f32;
        }
        stats.push([mean, rstd]);
    }
    (out, stats)
}

/// `a ⊙ σ(b)` for each row `[a | b]` of width `d`.
pub fn glu_rows(x: &[f32], d: usize) -> Vec<f32> {
    let h = d / 2;
    let mut out = Vec::with_capacity(x.len() / 2);
    for row in x.chunks(d) {
        for i in 0..h {
            out.push(row[i] * sigmoid(row[h + i]));
        }
    }
    out
}

pub fn gelu_in_place(x: &mut [f32]) {
    for v in x {
        *v = gelu_scalar(*v);
    }
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

pub fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
