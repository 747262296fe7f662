use super::kernels::gemm;
use super::rows;
use super::tape::{GradSink, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn tanh(z: f32) -> f32 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Tanh-approximated GeLU.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Which keys a query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttentionMask {
    /// `[batch × keys]` validity; `None` means every key is valid.
    pub key_valid: Option<Vec<bool>>,
    /// Forbid keys at positions after the query.
    pub causal: bool,
}

impl AttentionMask {
    fn allowed(&self, b: usize, tk: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|kv| kv[b * tk + j])
    }
}

pub(crate) struct AttentionRecord {
    pub(crate) q: Var,
    pub(crate) k: Var,
    pub(crate) v: Var,
    heads: usize,
    /// `[B, heads, Tq, Tk]`
    probs: Vec<f32>,
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a.max(0.0)).collect()).unwrap();
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| gelu_scalar(a)).collect()).unwrap();
        self.push(t, Op::Gelu(x))
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` for `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if d % 2 != 0 {
            return Err(Error::shape("glu (odd last dimension)", v.shape(), &[d]));
        }
        let h = d / 2;
        let out = rows::glu_rows(v.data(), d);
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Glu(x)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if axis >= s.len() {
            return Err(Error::Argument(format!("softmax axis {axis} for shape {s:?}")));
        }
        if !v.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut out = vec![0.0f32; v.numel()];
        let d = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| d[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for j in 0..len {
                    z += ((d[idx(j)] - m) as f64).exp();
                }
                for j in 0..len {
                    out[idx(j)] = (((d[idx(j)] - m) as f64).exp() / z) as f32;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", v.shape(), self.shape(gain)));
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let (out, stats) = rows::layer_norm_rows(v.data(), gd, bd, eps);
        let t = Tensor::new(v.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Mean negative log-likelihood over rows with `mask[i]`; defined as 0
    /// when no row is selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = self.value(logits);
        let vocab = v.last_dim();
        let rows = v.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len(), mask.len()]));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            let row = &v.data()[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(row) - row[t] as f64;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention on `[B, T, d]` inputs.
    ///
    /// Rows whose keys are all masked produce zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!("d_model {d} not divisible by {heads} heads")));
        }
        if let Some(kv) = &mask.key_valid {
            if kv.len() != b * tk {
                return Err(Error::shape("attention mask", &[kv.len()], &[b, tk]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; b * tq * d];
        let mut probs = vec![0.0f32; b * heads * tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                let qh = head_slice(qd, bi, tq, d, h, dh);
                let kh = head_slice(kd, bi, tk, d, h, dh);
                let vh = head_slice(vd, bi, tk, d, h, dh);
                let mut scores = vec![0.0f32; tq * tk];
                gemm(tq, dh, tk, &qh, false, &kh, true, &mut scores, false);
                let p = &mut probs[((bi * heads + h) * tq) * tk..((bi * heads + h + 1) * tq) * tk];
                for i in 0..tq {
                    let srow = &scores[i * tk..(i + 1) * tk];
                    let prow = &mut p[i * tk..(i + 1) * tk];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if mask.allowed(bi, tk, i, j) {
                            m = m.max(srow[j] as f64 * scale);
                        }
                    }
                    if m == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0f64;
                    for j in 0..tk {
                        if mask.allowed(bi, tk, i, j) {
                            z += (srow[j] as f64 * scale - m).exp();
                        }
                    }
                    for j in 0..tk {
                        if mask.allowed(bi, tk, i, j) {
                            prow[j] = ((srow[j] as f64 * scale - m).exp() / z) as f32;
                        }
                    }
                }
                let mut oh = vec![0.0f32; tq * dh];
                gemm(tq, tk, dh, p, false, &vh, false, &mut oh, false);
                scatter_head(&mut out, &oh, bi, tq, d, h, dh);
            }
        }
        let t = Tensor::new(&[b, tq, d], out)?;
        Ok(self.push(
            t,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                probs,
            })),
        ))
    }
}

fn head_slice(data: &[f32], b: usize, t: usize, d: usize, h: usize, dh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        let base = (b * t + i) * d + h * dh;
        out.extend_from_slice(&data[base..base + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f32], src: &[f32], b: usize, t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        let base = (b * t + i) * d + h * dh;
        for (o, s) in dst[base..base + dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += s;
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn relu_backward(tape: &Tape, x: Var, g: &[f32], sink: &mut GradSink) {
    let xv = tape.value(x).data();
    let d: Vec<f32> = g
        .iter()
        .zip(xv)
        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
        .collect();
    sink.add(x, &d);
}

pub(super) fn gelu_backward(tape: &Tape, x: Var, g: &[f32], sink: &mut GradSink) {
    let xv = tape.value(x).data();
    let d: Vec<f32> = g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
    sink.add(x, &d);
}

pub(super) fn glu_backward(tape: &Tape, x: Var, g: &[f32], sink: &mut GradSink) {
    let xv = tape.value(x);
    let dim = xv.last_dim();
    let h = dim / 2;
    let mut d = vec![0.0f32; xv.numel()];
    for ((row, drow), grow) in xv.data().chunks(dim).zip(d.chunks_mut(dim)).zip(g.chunks(h)) {
        for i in 0..h {
            let s = sigmoid(row[h + i]);
            drow[i] = grow[i] * s;
            drow[h + i] = grow[i] * row[i] * s * (1.0 - s);
        }
    }
    sink.add(x, &d);
}

pub(super) fn softmax_backward(out: &Tensor, x: Var, axis: usize, g: &[f32], sink: &mut GradSink) {
    let (outer, len, inner) = axis_split(out.shape(), axis);
    let y = out.data();
    let mut d = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let s: f64 = (0..len).map(|j| g[idx(j)] as f64 * y[idx(j)] as f64).sum();
            for j in 0..len {
                d[idx(j)] = (y[idx(j)] as f64 * (g[idx(j)] as f64 - s)) as f32;
            }
        }
    }
    sink.add(x, &d);
}

pub(super) fn layer_norm_backward(
    tape: &Tape,
    x: Var,
    gain: Var,
    bias: Var,
    stats: &[[f64; 2]],
    g: &[f32],
    sink: &mut GradSink,
) {
    let xv = tape.value(x);
    let d = xv.last_dim();
    let gd = tape.value(gain).data();
    let mut dx = vec![0.0f32; xv.numel()];
    let mut dgain = vec![0.0f64; d];
    let mut dbias = vec![0.0f64; d];
    for (r, (row, grow)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
        let [mean, rstd] = stats[r];
        let xh: Vec<f64> = row.iter().map(|&a| (a as f64 - mean) * rstd).collect();
        let dxh: Vec<f64> = grow.iter().zip(gd).map(|(&a, &b)| a as f64 * b as f64).collect();
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = (rstd * (dxh[j] - m1 - xh[j] * m2)) as f32;
            dgain[j] += grow[j] as f64 * xh[j];
            dbias[j] += grow[j] as f64;
        }
    }
    sink.add(x, &dx);
    let to32 = |v: Vec<f64>| v.into_iter().map(|a| a as f32).collect::<Vec<_>>();
    sink.add(gain, &to32(dgain));
    sink.add(bias, &to32(dbias));
}

pub(super) fn cross_entropy_backward(
    tape: &Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    g: &[f32],
    sink: &mut GradSink,
) {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 || !sink.wants(logits) {
        return;
    }
    let v = tape.value(logits);
    let vocab = v.last_dim();
    let scale = g[0] as f64 / count as f64;
    let buf = sink.buf(logits);
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &v.data()[r * vocab..(r + 1) * vocab];
        let lse = log_sum_exp(row);
        for j in 0..vocab {
            let p = (row[j] as f64 - lse).exp();
            let y = if j == t { 1.0 } else { 0.0 };
            buf[r * vocab + j] += ((p - y) * scale) as f32;
        }
    }
}

pub(super) fn attention_backward(tape: &Tape, rec: &AttentionRecord, g: &[f32], sink: &mut GradSink) {
    let (qv, kv, vv) = (tape.value(rec.q), tape.value(rec.k), tape.value(rec.v));
    let (b, tq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let tk = kv.shape()[1];
    let heads = rec.heads;
    let dh = d / heads;
    let scale = (1.0 / (dh as f64).sqrt()) as f32;
    let mut dq = vec![0.0f32; qv.numel()];
    let mut dk = vec![0.0f32; kv.numel()];
    let mut dv = vec![0.0f32; vv.numel()];
    for bi in 0..b {
        for h in 0..heads {
            let p = &rec.probs[((bi * heads + h) * tq) * tk..((bi * heads + h + 1) * tq) * tk];
            let gh = head_slice(g, bi, tq, d, h, dh);
            let qh = head_slice(qv.data(), bi, tq, d, h, dh);
            let kh = head_slice(kv.data(), bi, tk, d, h, dh);
            let vh = head_slice(vv.data(), bi, tk, d, h, dh);
            // dV = Pᵀ G
            let mut dvh = vec![0.0f32; tk * dh];
            gemm(tk, tq, dh, p, true, &gh, false, &mut dvh, false);
            scatter_head(&mut dv, &dvh, bi, tk, d, h, dh);
            // dP = G Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut dp = vec![0.0f32; tq * tk];
            gemm(tq, dh, tk, &gh, false, &vh, true, &mut dp, false);
            for i in 0..tq {
                let prow = &p[i * tk..(i + 1) * tk];
                let drow = &mut dp[i * tk..(i + 1) * tk];
                let s: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
                for (dd, pp) in drow.iter_mut().zip(prow) {
                    *dd = (*pp as f64 * (*dd as f64 - s)) as f32 * scale;
                }
            }
            let mut dqh = vec![0.0f32; tq * dh];
            gemm(tq, tk, dh, &dp, false, &kh, false, &mut dqh, false);
            scatter_head(&mut dq, &dqh, bi, tq, d, h, dh);
            let mut dkh = vec![0.0f32; tk * dh];
            gemm(tk, tq, dh, &dp, true, &qh, false, &mut dkh, false);
            scatter_head(&mut dk, &dkh, bi, tk, d, h, dh);
        }
    }
    sink.add(rec.q, &dq);
    sink.add(rec.k, &dk);
    sink.add(rec.v, &dv);
}

/// Inverted dropout state for one training step.
pub struct Dropout {
    pub rate: f32,
    pub rng: rand_chacha::ChaCha8Rng,
}

impl Dropout {
    /// Zeroes each element with probability `rate` and rescales survivors by `1/(1−rate)`.
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        use rand::Rng;
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).numel();
        let factor = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, factor)
    }
}

/// Applies `d` when present.
pub fn maybe_dropout(d: &mut Option<&mut Dropout>, tape: &mut Tape, x: Var) -> Result<Var> {
    match d {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}
