use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::tape::{GradSink, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Sequences shorter than this are convolved by direct summation.
pub const DIRECT_CONV_MAX_LEN: usize = 16;

thread_local! {
    static PLANS: RefCell<HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>> =
        RefCell::new(HashMap::new());
}

fn plans(p: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANS.with(|cell| {
        cell.borrow_mut()
            .entry(p)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(p), planner.plan_fft_inverse(p))
            })
            .clone()
    })
}

fn fft_len(len: usize) -> usize {
    (2 * len).next_power_of_two()
}

fn spectrum(x: &[f64], p: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(p, Complex64::new(0.0, 0.0));
    plans(p).0.process(&mut buf);
    buf
}

fn inverse_real(mut spec: Vec<Complex64>, len: usize) -> Vec<f64> {
    let p = spec.len();
    plans(p).1.process(&mut spec);
    spec[..len].iter().map(|c| c.re / p as f64).collect()
}

/// `y[t] = Σ_{i≤t} k[i]·u[t−i]` by direct summation.
pub fn causal_conv_direct(u: &[f64], k: &[f64]) -> Vec<f64> {
    let len = u.len();
    (0..len)
        .map(|t| (0..=t).map(|i| k[i] * u[t - i]).sum())
        .collect()
}

/// Same as [`causal_conv_direct`] through a zero-padded FFT of length ≥ 2L.
pub fn causal_conv_fft(u: &[f64], k: &[f64]) -> Vec<f64> {
    let len = u.len();
    if len == 0 {
        return vec![];
    }
    let p = fft_len(len);
    let (su, sk) = (spectrum(u, p), spectrum(&k[..len], p));
    inverse_real(su.iter().zip(&sk).map(|(a, b)| a * b).collect(), len)
}

fn conv_any(u: &[f64], k: &[f64]) -> Vec<f64> {
    if u.len() < DIRECT_CONV_MAX_LEN {
        causal_conv_direct(u, k)
    } else {
        causal_conv_fft(u, k)
    }
}

fn column(data: &[f32], b: usize, len: usize, ch: usize, h: usize) -> Vec<f64> {
    (0..len).map(|t| data[(b * len + t) * ch + h] as f64).collect()
}

fn conv_dims(u: &[usize], k: &[usize]) -> Result<(usize, usize, usize)> {
    let (b, len, ch) = match u.len() {
        2 => (1, u[0], u[1]),
        3 => (u[0], u[1], u[2]),
        _ => return Err(Error::shape("fft_causal_conv", u, k)),
    };
    if k != [len, ch] {
        return Err(Error::shape("fft_causal_conv", u, k));
    }
    Ok((b, len, ch))
}

impl Tape {
    /// Per-channel causal convolution of `u[(B,) L, H]` with a kernel `k[L, H]`.
    pub fn fft_causal_conv(&mut self, u: Var, k: Var) -> Result<Var> {
        let (b, len, ch) = conv_dims(self.shape(u), self.shape(k))?;
        let (ud, kd) = (self.value(u).data(), self.value(k).data());
        let mut out = vec![0.0f32; ud.len()];
        let direct = len < DIRECT_CONV_MAX_LEN;
        let p = fft_len(len.max(1));
        for h in 0..ch {
            let kc = column(kd, 0, len, ch, h);
            let ks = (!direct).then(|| spectrum(&kc, p));
            for bi in 0..b {
                let uc = column(ud, bi, len, ch, h);
                let y = match &ks {
                    None => causal_conv_direct(&uc, &kc),
                    Some(ks) => {
                        let su = spectrum(&uc, p);
                        inverse_real(su.iter().zip(ks).map(|(a, b)| a * b).collect(), len)
                    }
                };
                for (t, v) in y.iter().enumerate() {
                    out[(bi * len + t) * ch + h] = *v as f32;
                }
            }
        }
        let t = Tensor::new(self.shape(u), out)?;
        Ok(self.push(t, Op::CausalConv { u, k }))
    }
}

pub(super) fn causal_conv_backward(tape: &Tape, u: Var, k: Var, g: &[f32], sink: &mut GradSink) {
    let (b, len, ch) = conv_dims(tape.shape(u), tape.shape(k)).expect("checked in forward");
    let (ud, kd) = (tape.value(u).data(), tape.value(k).data());
    let want_u = sink.wants(u);
    let want_k = sink.wants(k);
    let mut du = vec![0.0f32; if want_u { ud.len() } else { 0 }];
    let mut dk = vec![0.0f32; if want_k { kd.len() } else { 0 }];
    for h in 0..ch {
        let kc = column(kd, 0, len, ch, h);
        let mut dk_acc = vec![0.0f64; len];
        for bi in 0..b {
            let mut gr = column(g, bi, len, ch, h);
            gr.reverse();
            if want_u {
                let mut r = conv_any(&gr, &kc);
                r.reverse();
                for (t, v) in r.iter().enumerate() {
                    du[(bi * len + t) * ch + h] = *v as f32;
                }
            }
            if want_k {
                let uc = column(ud, bi, len, ch, h);
                let r = conv_any(&gr, &uc);
                for (i, acc) in dk_acc.iter_mut().enumerate() {
                    *acc += r[len - 1 - i];
                }
            }
        }
        if want_k {
            for (i, v) in dk_acc.iter().enumerate() {
                dk[i * ch + h] = *v as f32;
            }
        }
    }
    if want_u {
        sink.add(u, &du);
    }
    if want_k {
        sink.add(k, &dk);
    }
}
