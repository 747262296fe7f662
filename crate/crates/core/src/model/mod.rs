//! Encoder/decoder assemblies of S4 and Transformer stacks.
//!
//! Every architecture shares one token embedding for encoder input, decoder
//! input and the output projection. Transformer stacks add sinusoidal position
//! encodings; S4 stacks see none.

mod config;
mod decode;
mod params;

pub use config::{DecoderKind, EncoderKind, ModelConfig, NormStyle};
pub use decode::{DecoderSession, FrozenModel};
pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{reverse_source, ParallelCorpus, SequenceBatch, TokenGrid};
use crate::error::{Error, Result};
use crate::ssm::S4BlockVars;
use crate::tensor::rows::LN_EPS;
use crate::tensor::{maybe_dropout, AttentionMask, Dropout, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ssm {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct S4BlockIds {
    pub ssm: Ssm,
    pub reverse: Option<Ssm>,
    pub mix: Linear,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CrossAttention {
    pub attn: Attention,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct S4Layer {
    pub blocks: Vec<S4BlockIds>,
    pub cross: Option<CrossAttention>,
    pub mlp: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerLayer {
    pub self_attn: Attention,
    pub self_norm: Norm,
    pub cross: Option<CrossAttention>,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub(crate) enum Layers {
    S4(Vec<S4Layer>),
    Transformer(Vec<TransformerLayer>),
}

#[derive(Clone, Debug)]
pub(crate) struct Stack {
    pub layers: Layers,
    /// Present for pre-norm stacks.
    pub final_norm: Option<Norm>,
}

impl Stack {
    fn positional(&self) -> bool {
        matches!(self.layers, Layers::Transformer(_))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub encoder: Option<Stack>,
    pub decoder: Stack,
}

/// A translation model: configuration, named parameters and their wiring.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, &mut self.rng);
        Linear {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str) -> Norm {
        let d = self.cfg.d_model;
        Norm {
            gain: self.store.add(format!("{name}.g"), Tensor::full(&[d], 1.0)),
            bias: self.store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str) -> Attention {
        let d = self.cfg.d_model;
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, act: Activation) -> FeedForward {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
            act,
            norm: self.norm(&format!("{name}.norm")),
        }
    }

    fn ssm(&mut self, name: &str) -> Result<Ssm> {
        let (a, b, c) =
            crate::ssm::init_ssm(self.cfg.d_model, self.cfg.state_dim, self.cfg.tie_state_matrices, &mut self.rng)?;
        Ok(Ssm {
            a: self.store.add(format!("{name}.a"), a),
            b: self.store.add(format!("{name}.b"), b),
            c: self.store.add(format!("{name}.c"), c),
        })
    }

    fn s4_block(&mut self, name: &str, bidirectional: bool) -> Result<S4BlockIds> {
        let d = self.cfg.d_model;
        let ssm = self.ssm(&format!("{name}.ssm"))?;
        let reverse = if bidirectional {
            Some(self.ssm(&format!("{name}.ssm_rev"))?)
        } else {
            None
        };
        Ok(S4BlockIds {
            ssm,
            reverse,
            mix: self.linear(&format!("{name}.mix"), d, 2 * d),
            norm: self.norm(&format!("{name}.norm")),
        })
    }

    fn s4_stack(&mut self, prefix: &str, layers: usize, bidirectional: bool, cross: bool) -> Result<Stack> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut blocks = Vec::with_capacity(self.cfg.blocks_per_layer);
            for b in 0..self.cfg.blocks_per_layer {
                blocks.push(self.s4_block(&format!("{prefix}.{l}.block.{b}"), bidirectional)?);
            }
            let cross = cross.then(|| CrossAttention {
                attn: self.attention(&format!("{prefix}.{l}.cross")),
                norm: self.norm(&format!("{prefix}.{l}.cross.norm")),
            });
            let mlp = self.ffn(&format!("{prefix}.{l}.mlp"), Activation::Gelu);
            out.push(S4Layer { blocks, cross, mlp });
        }
        Ok(Stack {
            layers: Layers::S4(out),
            final_norm: self.final_norm(prefix),
        })
    }

    fn transformer_stack(&mut self, prefix: &str, layers: usize, cross: bool) -> Stack {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let self_attn = self.attention(&format!("{prefix}.{l}.self"));
            let self_norm = self.norm(&format!("{prefix}.{l}.self.norm"));
            let cross = cross.then(|| CrossAttention {
                attn: self.attention(&format!("{prefix}.{l}.cross")),
                norm: self.norm(&format!("{prefix}.{l}.cross.norm")),
            });
            let ffn = self.ffn(&format!("{prefix}.{l}.ffn"), Activation::Relu);
            out.push(TransformerLayer {
                self_attn,
                self_norm,
                cross,
                ffn,
            });
        }
        Stack {
            layers: Layers::Transformer(out),
            final_norm: self.final_norm(prefix),
        }
    }

    fn final_norm(&mut self, prefix: &str) -> Option<Norm> {
        (self.cfg.norm == NormStyle::Pre).then(|| self.norm(&format!("{prefix}.norm")))
    }
}

/// Builds and initialises a model deterministically from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
    };
    let d = cfg.d_model;
    let table = Tensor::randn(&[cfg.vocab_size, d], (d as f32).powf(-0.5), &mut init.rng);
    let embed = init.store.add("embed".into(), table);
    let encoder = match cfg.encoder {
        EncoderKind::None => None,
        EncoderKind::S4 => Some(init.s4_stack("enc", cfg.encoder_layers, false, false)?),
        EncoderKind::S4bi => Some(init.s4_stack("enc", cfg.encoder_layers, true, false)?),
        EncoderKind::Transformer => Some(init.transformer_stack("enc", cfg.encoder_layers, false)),
    };
    let decoder = match cfg.decoder {
        DecoderKind::S4 => init.s4_stack("dec", cfg.decoder_layers, false, false)?,
        DecoderKind::S4a => init.s4_stack("dec", cfg.decoder_layers, false, true)?,
        DecoderKind::Transformer => init.transformer_stack("dec", cfg.decoder_layers, true),
    };
    Ok(Model {
        cfg: cfg.clone(),
        params: store,
        layout: Layout {
            embed,
            encoder,
            decoder,
        },
    })
}

/// Scalar parameter counts split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mt_loss: f32,
    pub ae_loss: Option<f32>,
    pub total: f32,
}

/// Teacher-forced statistics of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchScore {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub tokens: usize,
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(…)`.
pub fn sinusoid(position: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|j| {
            let rate = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = position as f64 * rate;
            (if j % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
        })
        .collect()
}

/// Decoder output of a teacher-forced pass.
pub struct Hidden {
    /// `[B, W, d]`, aligned with the decoder input grid.
    pub states: Var,
    pub rows: usize,
    pub width: usize,
}

/// Working state of one forward pass.
pub(crate) struct Pass<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub dropout: Option<&'a mut Dropout>,
    pub pre: bool,
    pub heads: usize,
    pub delta: f32,
}

impl Pass<'_> {
    fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        maybe_dropout(&mut self.dropout, self.tape, x)
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (self.var(l.w), self.var(l.b));
        self.tape.linear(x, w, Some(b))
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (self.var(n.gain), self.var(n.bias));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `norm(x + drop(f(x)))` after the sub-layer, or `x + drop(f(norm(x)))` before it.
    fn residual(&mut self, x: Var, n: Norm, f: impl FnOnce(&mut Self, Var) -> Result<Var>) -> Result<Var> {
        if self.pre {
            let h = self.norm(x, n)?;
            let y = f(self, h)?;
            let y = self.drop(y)?;
            self.tape.add(x, y)
        } else {
            let y = f(self, x)?;
            let y = self.drop(y)?;
            let r = self.tape.add(x, y)?;
            self.norm(r, n)
        }
    }

    fn attention(&mut self, x: Var, memory: Var, a: Attention, mask: &AttentionMask) -> Result<Var> {
        let q = self.linear(x, a.q)?;
        let k = self.linear(memory, a.k)?;
        let v = self.linear(memory, a.v)?;
        let o = self.tape.attention(q, k, v, self.heads, mask)?;
        self.linear(o, a.o)
    }

    fn ffn(&mut self, x: Var, f: FeedForward) -> Result<Var> {
        self.residual(x, f.norm, |p, h| {
            let u = p.linear(h, f.up)?;
            let u = match f.act {
                Activation::Gelu => p.tape.gelu(u),
                Activation::Relu => p.tape.relu(u),
            };
            let u = p.drop(u)?;
            p.linear(u, f.down)
        })
    }

    fn s4_block(&mut self, x: Var, blk: &S4BlockIds, lengths: Option<&[usize]>) -> Result<Var> {
        let vars = S4BlockVars {
            a: self.var(blk.ssm.a),
            b: self.var(blk.ssm.b),
            c: self.var(blk.ssm.c),
            reverse: blk.reverse.map(|r| (self.var(r.a), self.var(r.b), self.var(r.c))),
            mix_w: self.var(blk.mix.w),
            mix_b: self.var(blk.mix.b),
            norm_gain: self.var(blk.norm.gain),
            norm_bias: self.var(blk.norm.bias),
            delta: self.delta,
            pre_norm: self.pre,
        };
        vars.forward(self.tape, x, lengths, self.dropout.as_deref_mut())
    }

    fn stack(
        &mut self,
        stack: &Stack,
        mut x: Var,
        lengths: Option<&[usize]>,
        memory: Option<(Var, &AttentionMask)>,
        causal: bool,
    ) -> Result<Var> {
        match &stack.layers {
            Layers::S4(layers) => {
                for layer in layers {
                    for blk in &layer.blocks {
                        x = self.s4_block(x, blk, lengths)?;
                    }
                    if let Some(cross) = layer.cross {
                        let (mem, mask) =
                            memory.ok_or_else(|| Error::Contract("cross-attention needs encoder outputs".into()))?;
                        x = self.residual(x, cross.norm, |p, h| p.attention(h, mem, cross.attn, mask))?;
                    }
                    x = self.ffn(x, layer.mlp)?;
                }
            }
            Layers::Transformer(layers) => {
                let self_mask = AttentionMask {
                    key_valid: if causal {
                        None
                    } else {
                        lengths.map(|l| valid_mask(l, self.tape.shape(x)[1]))
                    },
                    causal,
                };
                for layer in layers {
                    let sa = layer.self_attn;
                    x = self.residual(x, layer.self_norm, |p, h| p.attention(h, h, sa, &self_mask))?;
                    if let Some(cross) = layer.cross {
                        let (mem, mask) =
                            memory.ok_or_else(|| Error::Contract("cross-attention needs encoder outputs".into()))?;
                        x = self.residual(x, cross.norm, |p, h| p.attention(h, mem, cross.attn, mask))?;
                    }
                    x = self.ffn(x, layer.ffn)?;
                }
            }
        }
        if let Some(n) = stack.final_norm {
            x = self.norm(x, n)?;
        }
        Ok(x)
    }
}

fn valid_mask(lengths: &[usize], width: usize) -> Vec<bool> {
    lengths.iter().flat_map(|&l| (0..width).map(move |t| t < l)).collect()
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Which parameters receive gradients during training.
    pub fn trainable(&self) -> Vec<bool> {
        let frozen = |n: &str| {
            self.cfg.freeze_state_matrices
                && [".ssm.a", ".ssm.b", ".ssm_rev.a", ".ssm_rev.b"].iter().any(|s| n.ends_with(s))
        };
        self.params.names().iter().map(|n| !frozen(n)).collect()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            total: self.params.count(),
            embedding: self.params.count_prefix("embed"),
            encoder: self.params.count_prefix("enc."),
            decoder: self.params.count_prefix("dec."),
        }
    }

    pub(crate) fn pass<'a>(&self, tape: &'a mut Tape, bound: &'a Bound, dropout: Option<&'a mut Dropout>) -> Pass<'a> {
        Pass {
            tape,
            bound,
            dropout,
            pre: self.cfg.norm == NormStyle::Pre,
            heads: self.cfg.n_heads,
            delta: self.cfg.delta,
        }
    }

    /// `√d`-scaled embeddings of `grid`, plus position encodings when `positional`.
    pub(crate) fn embed(&self, p: &mut Pass, grid: &TokenGrid, positional: bool) -> Result<Var> {
        let d = self.cfg.d_model;
        let ids: Vec<usize> = grid.ids.iter().map(|&i| i as usize).collect();
        let table = p.var(self.layout.embed);
        let e = p.tape.embedding(table, &ids, &[grid.rows, grid.width])?;
        let mut e = p.tape.scale(e, (d as f32).sqrt());
        if positional {
            let mut pe = Vec::with_capacity(grid.rows * grid.width * d);
            for _ in 0..grid.rows {
                for t in 0..grid.width {
                    pe.extend(sinusoid(t, d));
                }
            }
            let pe = p.tape.constant(Tensor::new(&[grid.rows, grid.width, d], pe)?);
            e = p.tape.add(e, pe)?;
        }
        p.drop(e)
    }

    /// Encoder outputs `[B, S, d]` for a source grid.
    pub(crate) fn encode_on(&self, p: &mut Pass, source: &TokenGrid) -> Result<Var> {
        let stack = self
            .layout
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Contract("decoder-only model has no encoder".into()))?;
        let x = self.embed(p, source, stack.positional())?;
        p.stack(stack, x, Some(&source.lengths), None, false)
    }

    /// Teacher-forced decoder states for every input cell.
    pub(crate) fn hidden_on(&self, p: &mut Pass, source: Option<&TokenGrid>, input: &TokenGrid) -> Result<Hidden> {
        let dec = &self.layout.decoder;
        let (rows, width) = (input.rows, input.width);
        let d = self.cfg.d_model;
        let states = match (self.cfg.encoder, self.cfg.decoder) {
            (EncoderKind::None, _) => {
                let x = self.embed(p, input, dec.positional())?;
                p.stack(dec, x, Some(&input.lengths), None, true)?
            }
            (_, DecoderKind::S4) => {
                let src = source.ok_or_else(|| Error::Contract("encoder-decoder batch without source".into()))?;
                let enc = self.encode_on(p, src)?;
                let tgt = self.embed(p, input, false)?;
                let joined = p.tape.concat_rows(&[enc, tgt])?;
                let sw = src.width;
                let cw = (0..rows).map(|b| src.lengths[b] + input.lengths[b]).max().unwrap_or(0);
                let mut gather = Vec::with_capacity(rows * cw);
                for b in 0..rows {
                    let (s, t) = (src.lengths[b], input.lengths[b]);
                    for c in 0..cw {
                        gather.push(if c < s {
                            Some(b * sw + c)
                        } else if c < s + t {
                            Some(rows * sw + b * width + c - s)
                        } else {
                            None
                        });
                    }
                }
                let x = p.tape.gather_rows(joined, gather, &[rows, cw, d])?;
                let lens: Vec<usize> = (0..rows).map(|b| src.lengths[b] + input.lengths[b]).collect();
                let y = p.stack(dec, x, Some(&lens), None, true)?;
                let mut back = Vec::with_capacity(rows * width);
                for b in 0..rows {
                    for j in 0..width {
                        back.push((j < input.lengths[b]).then(|| b * cw + src.lengths[b] + j));
                    }
                }
                p.tape.gather_rows(y, back, &[rows, width, d])?
            }
            _ => {
                let src = source.ok_or_else(|| Error::Contract("encoder-decoder batch without source".into()))?;
                let enc = self.encode_on(p, src)?;
                let mask = AttentionMask {
                    key_valid: Some(src.valid_mask()),
                    causal: false,
                };
                let x = self.embed(p, input, dec.positional())?;
                p.stack(dec, x, Some(&input.lengths), Some((enc, &mask)), true)?
            }
        };
        Ok(Hidden { states, rows, width })
    }

    /// Logits `[n, V]` for the selected flat cells of `hidden`.
    pub(crate) fn logits_on(&self, p: &mut Pass, hidden: &Hidden, cells: &[usize]) -> Result<Var> {
        let d = self.cfg.d_model;
        let h = p.tape.gather_rows(hidden.states, cells.iter().map(|&c| Some(c)).collect(), &[cells.len(), d])?;
        let table = p.var(self.layout.embed);
        p.tape.matmul_t(h, table, false, true)
    }

    /// Loss on a bound tape; returns the differentiable total and its breakdown.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &SequenceBatch,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Var, LossBreakdown)> {
        let (total, breakdown, _) = self.forward_scored(tape, bound, batch, dropout)?;
        Ok((total, breakdown))
    }

    fn forward_scored(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &SequenceBatch,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Var, LossBreakdown, Var)> {
        let ae = self.cfg.include_ae_loss;
        if ae && batch.sep_positions.is_empty() {
            return Err(Error::Contract("source reconstruction loss needs SEP positions".into()));
        }
        let mut p = self.pass(tape, bound, dropout);
        let hidden = self.hidden_on(&mut p, batch.source.as_ref(), &batch.input)?;
        let cells: Vec<usize> = (0..batch.loss_mask.len()).filter(|&i| batch.loss_mask[i]).collect();
        let targets: Vec<usize> = cells.iter().map(|&i| batch.target[i] as usize).collect();
        let logits = self.logits_on(&mut p, &hidden, &cells)?;
        let mt = p.tape.cross_entropy(logits, &targets, &vec![true; cells.len()])?;
        let mt_loss = p.tape.value(mt).item();
        if !ae {
            return Ok((
                mt,
                LossBreakdown {
                    mt_loss,
                    ae_loss: None,
                    total: mt_loss,
                },
                logits,
            ));
        }
        let ae_cells: Vec<usize> = (0..batch.ae_mask.len()).filter(|&i| batch.ae_mask[i]).collect();
        let ae_targets: Vec<usize> = ae_cells.iter().map(|&i| batch.target[i] as usize).collect();
        let ae_logits = self.logits_on(&mut p, &hidden, &ae_cells)?;
        let ae_var = p.tape.cross_entropy(ae_logits, &ae_targets, &vec![true; ae_cells.len()])?;
        let ae_loss = p.tape.value(ae_var).item();
        let total = p.tape.add(mt, ae_var)?;
        let total_value = p.tape.value(total).item();
        Ok((
            total,
            LossBreakdown {
                mt_loss,
                ae_loss: Some(ae_loss),
                total: total_value,
            },
            logits,
        ))
    }

    /// Evaluation-mode loss and teacher-forced token accuracy.
    pub fn score(&self, batch: &SequenceBatch) -> Result<BatchScore> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (_, loss, logits) = self.forward_scored(&mut tape, &bound, batch, None)?;
        let cells: Vec<usize> = (0..batch.loss_mask.len()).filter(|&i| batch.loss_mask[i]).collect();
        let lv = tape.value(logits);
        let v = lv.last_dim();
        let correct = cells
            .iter()
            .zip(lv.data().chunks(v))
            .filter(|(&c, row)| argmax(row) == batch.target[c] as usize)
            .count();
        Ok(BatchScore {
            loss,
            correct,
            tokens: cells.len(),
        })
    }

    /// Teacher-forced decoder states `[B, W, d]` without dropout.
    /// The corpus as the model consumes it: sources reversed when the
    /// configuration asks for it.
    pub fn prepare_corpus(&self, corpus: &ParallelCorpus) -> ParallelCorpus {
        if self.cfg.reverse_source {
            reverse_source(corpus)
        } else {
            corpus.clone()
        }
    }

    pub fn prepare_source(&self, source: &[u32]) -> Vec<u32> {
        if self.cfg.reverse_source {
            source.iter().rev().copied().collect()
        } else {
            source.to_vec()
        }
    }

    pub fn hidden_states(&self, source: Option<&TokenGrid>, input: &TokenGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut p = self.pass(&mut tape, &bound, None);
        let h = self.hidden_on(&mut p, source, input)?;
        Ok(tape.value(h.states).clone())
    }

    /// Encoder outputs `[B, S, d]` without dropout.
    pub fn encoder_states(&self, source: &TokenGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut p = self.pass(&mut tape, &bound, None);
        let e = self.encode_on(&mut p, source)?;
        Ok(tape.value(e).clone())
    }

    /// Teacher-forced logits `[B, W, V]` for every decoder input cell.
    pub fn logits(&self, source: Option<&TokenGrid>, input: &TokenGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut p = self.pass(&mut tape, &bound, None);
        let h = self.hidden_on(&mut p, source, input)?;
        let cells: Vec<usize> = (0..h.rows * h.width).collect();
        let l = self.logits_on(&mut p, &h, &cells)?;
        tape.value(l).reshape(&[h.rows, h.width, self.cfg.vocab_size])
    }

    /// Rebuilds a model around existing parameters (checkpoint loading).
    pub fn from_params(cfg: &ModelConfig, params: &ParamStore) -> Result<Model> {
        let mut model = build_model(cfg, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
