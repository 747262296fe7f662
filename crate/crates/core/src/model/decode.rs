//! Token-by-token decoding with recurrent S4 state and attention caches.

use super::{Activation, Attention, CrossAttention, EncoderKind, FeedForward, Layers, Linear, Model, Norm, Stack};
use crate::data::{TokenGrid, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::ssm::{FrozenS4Block, S4BlockState};
use crate::tensor::gemm;
use crate::tensor::rows::{self, LN_EPS};

#[derive(Clone, Debug)]
struct FLinear {
    w: Vec<f32>,
    b: Vec<f32>,
    k: usize,
    n: usize,
}

impl FLinear {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        rows::linear_rows(x, self.k, &self.w, self.n, Some(&self.b))
    }
}

#[derive(Clone, Debug)]
struct FNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
}

impl FNorm {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        rows::layer_norm_rows(x, &self.gain, &self.bias, LN_EPS).0
    }
}

#[derive(Clone, Debug)]
struct FAttention {
    q: FLinear,
    k: FLinear,
    v: FLinear,
    o: FLinear,
}

#[derive(Clone, Debug)]
struct FFeedForward {
    up: FLinear,
    down: FLinear,
    act: Activation,
    norm: FNorm,
}

#[derive(Clone, Debug)]
struct FCross {
    attn: FAttention,
    norm: FNorm,
}

#[derive(Clone, Debug)]
enum FLayer {
    S4 {
        blocks: Vec<FrozenS4Block>,
        cross: Option<FCross>,
        mlp: FFeedForward,
    },
    Transformer {
        self_attn: FAttention,
        self_norm: FNorm,
        cross: Option<FCross>,
        ffn: FFeedForward,
    },
}

/// A model prepared for incremental decoding: S4 blocks discretised once,
/// weights copied out of the parameter store.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    model: Model,
    layers: Vec<FLayer>,
    final_norm: Option<FNorm>,
    positional: bool,
}

#[derive(Clone, Debug, Default)]
struct LayerState {
    blocks: Vec<S4BlockState>,
    /// Per row, `[t, d]` keys and values seen so far.
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
    /// `[S, d]` projections of the encoder outputs, shared by every row.
    cross_k: Vec<f32>,
    cross_v: Vec<f32>,
}

/// Decoder state for one source sentence and `rows` hypotheses.
#[derive(Clone, Debug)]
pub struct DecoderSession<'a> {
    model: &'a FrozenModel,
    rows: usize,
    pos: usize,
    layers: Vec<LayerState>,
}

impl FrozenModel {
    pub fn new(model: &Model) -> Result<Self> {
        let p = model.params();
        let t = |id| p.get(id).data().to_vec();
        let lin = |l: Linear| {
            let s = p.get(l.w).shape();
            FLinear {
                w: t(l.w),
                b: t(l.b),
                k: s[0],
                n: s[1],
            }
        };
        let norm = |n: Norm| FNorm {
            gain: t(n.gain),
            bias: t(n.bias),
        };
        let attn = |a: Attention| FAttention {
            q: lin(a.q),
            k: lin(a.k),
            v: lin(a.v),
            o: lin(a.o),
        };
        let cross = |c: Option<CrossAttention>| {
            c.map(|c| FCross {
                attn: attn(c.attn),
                norm: norm(c.norm),
            })
        };
        let ffn = |f: FeedForward| FFeedForward {
            up: lin(f.up),
            down: lin(f.down),
            act: f.act,
            norm: norm(f.norm),
        };
        let cfg = model.config();
        let pre = cfg.norm == super::NormStyle::Pre;
        let dec: &Stack = &model.layout().decoder;
        let layers = match &dec.layers {
            Layers::S4(ls) => ls
                .iter()
                .map(|l| {
                    let blocks = l
                        .blocks
                        .iter()
                        .map(|b| {
                            FrozenS4Block::new(
                                p.get(b.ssm.a),
                                p.get(b.ssm.b),
                                p.get(b.ssm.c),
                                cfg.delta,
                                [p.get(b.mix.w), p.get(b.mix.b), p.get(b.norm.gain), p.get(b.norm.bias)],
                                pre,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(FLayer::S4 {
                        blocks,
                        cross: cross(l.cross),
                        mlp: ffn(l.mlp),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            Layers::Transformer(ls) => ls
                .iter()
                .map(|l| FLayer::Transformer {
                    self_attn: attn(l.self_attn),
                    self_norm: norm(l.self_norm),
                    cross: cross(l.cross),
                    ffn: ffn(l.ffn),
                })
                .collect(),
        };
        Ok(FrozenModel {
            model: model.clone(),
            layers,
            final_norm: dec.final_norm.map(norm),
            positional: dec.positional(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn d(&self) -> usize {
        self.model.config().d_model
    }

    fn pre(&self) -> bool {
        self.model.config().norm == super::NormStyle::Pre
    }

    /// Primes a single-row session on `source` (content tokens) and returns it
    /// with the logits of the first target token.
    pub fn start(&self, source: &[u32]) -> Result<(DecoderSession<'_>, Vec<f32>)> {
        let mut s = DecoderSession {
            model: self,
            rows: 1,
            pos: 0,
            layers: vec![LayerState::default(); self.layers.len()],
        };
        for (st, layer) in s.layers.iter_mut().zip(&self.layers) {
            match layer {
                FLayer::S4 { blocks, .. } => st.blocks = blocks.iter().map(|b| b.zero_state(1)).collect(),
                FLayer::Transformer { .. } => {
                    st.self_k = vec![Vec::new()];
                    st.self_v = vec![Vec::new()];
                }
            }
        }
        let cfg = self.model.config();
        let logits = match cfg.encoder {
            EncoderKind::None => {
                let mut prefix = Vec::with_capacity(source.len() + 3);
                prefix.push(BOS);
                prefix.extend_from_slice(source);
                prefix.extend([EOS, SEP]);
                let mut last = Vec::new();
                for &tok in &prefix {
                    last = s.advance_tokens(&[tok])?;
                }
                self.project(&last)
            }
            _ => {
                let mut src = source.to_vec();
                src.push(EOS);
                let grid = TokenGrid::from_rows(&[src]);
                let enc = self.model.encoder_states(&grid)?;
                let d = self.d();
                let enc = enc.data();
                let cross_stack = self.layers.iter().any(|l| match l {
                    FLayer::S4 { cross, .. } => cross.is_some(),
                    FLayer::Transformer { cross, .. } => cross.is_some(),
                });
                if cross_stack {
                    for (st, layer) in s.layers.iter_mut().zip(&self.layers) {
                        let c = match layer {
                            FLayer::S4 { cross, .. } | FLayer::Transformer { cross, .. } => cross,
                        };
                        if let Some(c) = c {
                            st.cross_k = c.attn.k.apply(enc);
                            st.cross_v = c.attn.v.apply(enc);
                        }
                    }
                } else {
                    for row in enc.chunks(d) {
                        s.advance_vectors(row.to_vec())?;
                    }
                }
                let h = s.advance_tokens(&[BOS])?;
                self.project(&h)
            }
        };
        Ok((s, logits))
    }

    /// `h[rows, d] · Eᵀ`.
    fn project(&self, h: &[f32]) -> Vec<f32> {
        let d = self.d();
        let table = self.model.params().get(self.model.layout().embed).data();
        let v = table.len() / d;
        let rows = h.len() / d;
        let mut out = vec![0.0; rows * v];
        gemm(rows, d, v, h, false, table, true, &mut out, false);
        out
    }

    fn embed_tokens(&self, tokens: &[u32], pos: usize) -> Result<Vec<f32>> {
        let d = self.d();
        let table = self.model.params().get(self.model.layout().embed).data();
        let vocab = table.len() / d;
        let scale = (d as f32).sqrt();
        let pe = self.positional.then(|| super::sinusoid(pos, d));
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            let t = tok as usize;
            if t >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: t,
                    size: vocab,
                });
            }
            let row = &table[t * d..(t + 1) * d];
            match &pe {
                Some(pe) => out.extend(row.iter().zip(pe).map(|(&e, &p)| e * scale + p)),
                None => out.extend(row.iter().map(|&e| e * scale)),
            }
        }
        Ok(out)
    }
}

fn residual(pre: bool, x: Vec<f32>, norm: &FNorm, f: impl FnOnce(&[f32]) -> Vec<f32>) -> Vec<f32> {
    if pre {
        let h = norm.apply(&x);
        let mut y = f(&h);
        rows::add_in_place(&mut y, &x);
        y
    } else {
        let mut y = f(&x);
        rows::add_in_place(&mut y, &x);
        norm.apply(&y)
    }
}

fn feed_forward(pre: bool, x: Vec<f32>, f: &FFeedForward) -> Vec<f32> {
    residual(pre, x, &f.norm, |h| {
        let mut u = f.up.apply(h);
        match f.act {
            Activation::Gelu => rows::gelu_in_place(&mut u),
            Activation::Relu => rows::relu_in_place(&mut u),
        }
        f.down.apply(&u)
    })
}

/// One query row against `[t, d]` keys/values, split over heads.
fn attend(q: &[f32], k: &[f32], v: &[f32], heads: usize, out: &mut [f32]) {
    let d = q.len();
    let dh = d / heads;
    let t = k.len() / d.max(1);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0f64; t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for c in 0..dh {
            let mut acc = 0.0f64;
            for (j, s) in scores.iter().enumerate() {
                acc += s * v[j * d + h * dh + c] as f64;
            }
            out[h * dh + c] = if t == 0 { 0.0 } else { (acc / z) as f32 };
        }
    }
}

impl DecoderSession<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of decoder positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token per row and returns logits `[rows, V]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let h = self.advance_tokens(tokens)?;
        Ok(self.model.project(&h))
    }

    /// Keeps the rows named by `idx`, in order; indices may repeat.
    pub fn select(&mut self, idx: &[usize]) {
        for st in &mut self.layers {
            for b in &mut st.blocks {
                b.select(idx);
            }
            if !st.self_k.is_empty() {
                st.self_k = idx.iter().map(|&i| st.self_k[i].clone()).collect();
                st.self_v = idx.iter().map(|&i| st.self_v[i].clone()).collect();
            }
        }
        self.rows = idx.len();
    }

    fn advance_tokens(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        if tokens.len() != self.rows {
            return Err(Error::Contract(format!("{} tokens for {} rows", tokens.len(), self.rows)));
        }
        let x = self.model.embed_tokens(tokens, self.pos)?;
        self.advance_vectors(x)
    }

    /// Runs one position `x[rows, d]` through every decoder layer.
    fn advance_vectors(&mut self, mut x: Vec<f32>) -> Result<Vec<f32>> {
        let fm = self.model;
        let (d, pre) = (fm.d(), fm.pre());
        let heads = fm.model.config().n_heads;
        let rows = self.rows;
        for (st, layer) in self.layers.iter_mut().zip(&fm.layers) {
            match layer {
                FLayer::S4 { blocks, cross, mlp } => {
                    for (b, s) in blocks.iter().zip(st.blocks.iter_mut()) {
                        x = b.step(s, &x)?;
                    }
                    if let Some(c) = cross {
                        x = cross_step(pre, x, c, st, heads, d);
                    }
                    x = feed_forward(pre, x, mlp);
                }
                FLayer::Transformer {
                    self_attn,
                    self_norm,
                    cross,
                    ffn,
                } => {
                    x = residual(pre, x, self_norm, |h| {
                        let q = self_attn.q.apply(h);
                        let k = self_attn.k.apply(h);
                        let v = self_attn.v.apply(h);
                        let mut o = vec![0.0; rows * d];
                        for r in 0..rows {
                            st.self_k[r].extend_from_slice(&k[r * d..(r + 1) * d]);
                            st.self_v[r].extend_from_slice(&v[r * d..(r + 1) * d]);
                            attend(
                                &q[r * d..(r + 1) * d],
                                &st.self_k[r],
                                &st.self_v[r],
                                heads,
                                &mut o[r * d..(r + 1) * d],
                            );
                        }
                        self_attn.o.apply(&o)
                    });
                    if let Some(c) = cross {
                        x = cross_step(pre, x, c, st, heads, d);
                    }
                    x = feed_forward(pre, x, ffn);
                }
            }
        }
        if let Some(n) = &fm.final_norm {
            x = n.apply(&x);
        }
        self.pos += 1;
        Ok(x)
    }
}

fn cross_step(pre: bool, x: Vec<f32>, c: &FCross, st: &LayerState, heads: usize, d: usize) -> Vec<f32> {
    residual(pre, x, &c.norm, |h| {
        let q = c.attn.q.apply(h);
        let mut o = vec![0.0; q.len()];
        for (qr, or) in q.chunks(d).zip(o.chunks_mut(d)) {
            attend(qr, &st.cross_k, &st.cross_v, heads, or);
        }
        c.attn.o.apply(&o)
    })
}
