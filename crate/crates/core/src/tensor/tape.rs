use super::{conv, nn, ops, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Glu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<[f64; 2]> },
    Gather { x: Var, rows: Vec<Option<usize>> },
    Concat { parts: Vec<Var> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    MulConst { x: Var, factor: Vec<f32> },
    CausalConv { u: Var, k: Var },
    Inverse(Var),
    Krylov { a: Var, b: Var },
    KernelContract { v: Var, c: Var },
    Attention(Box<nn::AttentionRecord>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | BatchMatMul { a, b } | Add(a, b) | Sub(a, b) | Mul(a, b) => {
                vec![*a, *b]
            }
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Scale(x, _) | Relu(x) | Gelu(x) | Glu(x) | Reshape(x) | Sum(x) | Inverse(x) => {
                vec![*x]
            }
            AddBias(x, b) => vec![*x, *b],
            Softmax { x, .. } | Gather { x, .. } | MulConst { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat { parts } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            CausalConv { u, k } => vec![*u, *k],
            Krylov { a, b } => vec![*a, *b],
            KernelContract { v, c } => vec![*v, *c],
            Attention(r) => vec![r.q, r.k, r.v],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every record's inputs were produced by earlier records, so the tape is
/// topologically sorted by construction and `backward` is a single reverse
/// sweep. A tape is confined to one thread.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(&self.shapes[v.0], g.to_vec()).expect("grad shape"))
    }

    /// Gradient for `v`, or zeros of the right shape when `v` did not influence the loss.
    pub fn tensor_or_zeros(&self, v: Var) -> Tensor {
        self.tensor(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let mut sink = GradSink {
                grads: lo,
                nodes: &self.nodes,
            };
            self.backward_node(i, g, &mut sink);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, i: usize, g: &[f32], sink: &mut GradSink) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => ops::matmul_backward(self, *a, *b, *ta, *tb, g, sink),
            Op::Linear { x, w, b } => ops::linear_backward(self, *x, *w, *b, g, sink),
            Op::BatchMatMul { a, b } => ops::bmm_backward(self, *a, *b, g, sink),
            Op::Add(a, b) => {
                sink.add(*a, g);
                sink.add(*b, g);
            }
            Op::Sub(a, b) => {
                sink.add(*a, g);
                sink.add_scaled(*b, g, -1.0);
            }
            Op::Mul(a, b) => ops::mul_backward(self, *a, *b, g, sink),
            Op::Scale(x, c) => sink.add_scaled(*x, g, *c),
            Op::AddBias(x, b) => ops::add_bias_backward(*x, *b, g, sink),
            Op::Relu(x) => nn::relu_backward(self, *x, g, sink),
            Op::Gelu(x) => nn::gelu_backward(self, *x, g, sink),
            Op::Glu(x) => nn::glu_backward(self, *x, g, sink),
            Op::Softmax { x, axis } => nn::softmax_backward(out, *x, *axis, g, sink),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => nn::layer_norm_backward(self, *x, *gain, *bias, stats, g, sink),
            Op::Gather { x, rows } => ops::gather_backward(self, *x, rows, g, sink),
            Op::Concat { parts } => ops::concat_backward(self, parts, g, sink),
            Op::Reshape(x) => sink.add(*x, g),
            Op::Sum(x) => {
                if sink.wants(*x) {
                    let n = self.value(*x).numel();
                    sink.add(*x, &vec![g[0]; n]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => nn::cross_entropy_backward(self, *logits, targets, mask, g, sink),
            Op::MulConst { x, factor } => {
                let d: Vec<f32> = g.iter().zip(factor).map(|(a, b)| a * b).collect();
                sink.add(*x, &d);
            }
            Op::CausalConv { u, k } => conv::causal_conv_backward(self, *u, *k, g, sink),
            Op::Inverse(x) => ops::inverse_backward(self, out, *x, g, sink),
            Op::Krylov { a, b } => ops::krylov_backward(self, out, *a, *b, g, sink),
            Op::KernelContract { v, c } => ops::contract_backward(self, *v, *c, g, sink),
            Op::Attention(rec) => nn::attention_backward(self, rec, g, sink),
        }
    }
}

/// Accumulates gradients into earlier tape records.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f32>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [f32] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f32]) {
        if !self.wants(v) {
            return;
        }
        let buf = self.buf(v);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    pub(crate) fn add_scaled(&mut self, v: Var, g: &[f32], c: f32) {
        if !self.wants(v) {
            return;
        }
        let buf = self.buf(v);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += c * x;
        }
    }
}
