use rand::Rng;

use super::{discretize_on_tape, hippo_legs, hippo_legs_input, kernel_on_tape, Matrix};
use crate::error::{Error, Result};
use crate::tensor::kernels::{dgemm_plain, invert};
use crate::tensor::rows::{self, LN_EPS};
use crate::tensor::{maybe_dropout, Dropout, Tape, Tensor, Var};

/// Evaluation path for [`s4_block_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    Conv,
    Recurrent,
}

/// One S4 block: `H` SSM channels, GeLU, a `H → 2H` mixing layer with GLU,
/// a residual connection and layer normalisation.
///
/// `a` is `[G, N, N]` and `b` is `[G, N]` with `G = 1` when the state
/// matrices are shared by all channels, or `G = H` otherwise.
#[derive(Clone, Debug)]
pub struct S4Block {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub mix_w: Tensor,
    pub mix_b: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub delta: f32,
    pub pre_norm: bool,
}

impl S4Block {
    /// HiPPO-LegS initialisation with random output projections.
    pub fn init<R: Rng + ?Sized>(h: usize, n: usize, shared: bool, rng: &mut R) -> Result<Self> {
        let (a, b, c) = init_ssm(h, n, shared, rng)?;
        Ok(S4Block {
            a,
            b,
            c,
            mix_w: Tensor::uniform(&[h, 2 * h], 1.0 / (h as f32).sqrt(), rng),
            mix_b: Tensor::zeros(&[2 * h]),
            norm_gain: Tensor::full(&[h], 1.0),
            norm_bias: Tensor::zeros(&[h]),
            delta: 1.0,
            pre_norm: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.c.shape()[1]
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> S4BlockVars {
        S4BlockVars {
            a: tape.param(self.a.clone()),
            b: tape.param(self.b.clone()),
            c: tape.param(self.c.clone()),
            reverse: None,
            mix_w: tape.param(self.mix_w.clone()),
            mix_b: tape.param(self.mix_b.clone()),
            norm_gain: tape.param(self.norm_gain.clone()),
            norm_bias: tape.param(self.norm_bias.clone()),
            delta: self.delta,
            pre_norm: self.pre_norm,
        }
    }

    /// Discretises once for step-by-step inference.
    pub fn freeze(&self) -> Result<FrozenS4Block> {
        FrozenS4Block::new(
            &self.a,
            &self.b,
            &self.c,
            self.delta,
            [&self.mix_w, &self.mix_b, &self.norm_gain, &self.norm_bias],
            self.pre_norm,
        )
    }
}

/// HiPPO-LegS `(A, B)` for `G` groups and `C ~ N(0, 1/N)` for `h` channels.
pub(crate) fn init_ssm<R: Rng + ?Sized>(
    h: usize,
    n: usize,
    shared: bool,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Tensor)> {
    let groups = if shared { 1 } else { h };
    let a = hippo_legs(n)?;
    let b = hippo_legs_input(n);
    let a_data: Vec<f32> = (0..groups).flat_map(|_| a.data.iter().map(|&v| v as f32)).collect();
    let b_data: Vec<f32> = (0..groups).flat_map(|_| b.iter().map(|&v| v as f32)).collect();
    Ok((
        Tensor::new(&[groups, n, n], a_data)?,
        Tensor::new(&[groups, n], b_data)?,
        Tensor::randn(&[h, n], (1.0 / n as f32).sqrt(), rng),
    ))
}

/// Tape handles for one block. `reverse` holds the `(A, B, C)` of the
/// backward direction in a bidirectional block.
#[derive(Clone, Copy, Debug)]
pub struct S4BlockVars {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub reverse: Option<(Var, Var, Var)>,
    pub mix_w: Var,
    pub mix_b: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub delta: f32,
    pub pre_norm: bool,
}

/// Gather rows reversing each sequence within its valid length; padding rows map to zero.
pub(crate) fn reverse_rows(batch: usize, len: usize, lengths: Option<&[usize]>) -> Vec<Option<usize>> {
    let mut rows = Vec::with_capacity(batch * len);
    for b in 0..batch {
        let n = lengths.map_or(len, |l| l[b]);
        for t in 0..len {
            rows.push((t < n).then(|| b * len + n - 1 - t));
        }
    }
    rows
}

fn ssm_conv(tape: &mut Tape, x: Var, a: Var, b: Var, c: Var, delta: f32, len: usize) -> Result<Var> {
    let (ab, bb) = discretize_on_tape(tape, a, b, delta)?;
    let k = kernel_on_tape(tape, ab, bb, c, len)?;
    tape.fft_causal_conv(x, k)
}

impl S4BlockVars {
    /// Convolutional forward over `u[B, L, H]` (or `[L, H]`). `lengths` gives
    /// the valid prefix of each sequence and only matters for the backward
    /// direction of a bidirectional block.
    pub fn forward(
        &self,
        tape: &mut Tape,
        u: Var,
        lengths: Option<&[usize]>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let shape = tape.shape(u).to_vec();
        let (batch, len) = match shape.len() {
            2 => (1, shape[0]),
            3 => (shape[0], shape[1]),
            _ => return Err(Error::shape("s4 block", &shape, tape.shape(self.c))),
        };
        let x = if self.pre_norm {
            tape.layer_norm(u, self.norm_gain, self.norm_bias, LN_EPS)?
        } else {
            u
        };
        let mut y = ssm_conv(tape, x, self.a, self.b, self.c, self.delta, len)?;
        if let Some((a, b, c)) = self.reverse {
            let rows = reverse_rows(batch, len, lengths);
            let xr = tape.gather_rows(x, rows.clone(), &shape)?;
            let yr = ssm_conv(tape, xr, a, b, c, self.delta, len)?;
            let back = tape.gather_rows(yr, rows, &shape)?;
            y = tape.add(y, back)?;
        }
        let y = tape.gelu(y);
        let y = maybe_dropout(&mut dropout, tape, y)?;
        let m = tape.linear(y, self.mix_w, Some(self.mix_b))?;
        let m = tape.glu(m)?;
        let m = maybe_dropout(&mut dropout, tape, m)?;
        let r = tape.add(u, m)?;
        if self.pre_norm {
            Ok(r)
        } else {
            tape.layer_norm(r, self.norm_gain, self.norm_bias, LN_EPS)
        }
    }
}

/// Block with discretised state matrices cached in `f64` for recurrent stepping.
#[derive(Clone, Debug)]
pub struct FrozenS4Block {
    h: usize,
    n: usize,
    groups: usize,
    /// `[G, N, N]`, each `Āᵀ`.
    a_bar_t: Vec<f64>,
    b_bar: Vec<f64>,
    c: Vec<f64>,
    mix_w: Vec<f32>,
    mix_b: Vec<f32>,
    gain: Vec<f32>,
    bias: Vec<f32>,
    pre_norm: bool,
}

/// Recurrent state for `rows` independent sequences through one block.
#[derive(Clone, Debug, PartialEq)]
pub struct S4BlockState {
    rows: usize,
    /// `[rows, H, N]`
    x: Vec<f64>,
}

impl S4BlockState {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Keeps the rows named by `idx`, in that order (beam reordering).
    pub fn select(&mut self, idx: &[usize]) {
        let w = self.x.len() / self.rows.max(1);
        let mut x = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            x.extend_from_slice(&self.x[i * w..(i + 1) * w]);
        }
        self.x = x;
        self.rows = idx.len();
    }
}

/// Bilinear discretisation of one `N×N` group in `f64`; returns `(Āᵀ, B̄)`.
pub(crate) fn discretize_group(a: &[f32], b: &[f32], n: usize, delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let half = delta / 2.0;
    let mut back = vec![0.0f64; n * n];
    let mut fwd = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            let v = a[i * n + j] as f64;
            back[i * n + j] = eye - half * v;
            fwd[i * n + j] = eye + half * v;
        }
    }
    let inv = invert(n, &back).map_err(|condition| Error::Singular { condition })?;
    let a_bar = dgemm_plain(n, n, n, &inv, &fwd);
    let bs: Vec<f64> = b.iter().map(|&v| v as f64 * delta).collect();
    let b_bar = Matrix::from_vec(n, n, inv)?.matvec(&bs);
    let mut a_t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a_t[j * n + i] = a_bar[i * n + j];
        }
    }
    Ok((a_t, b_bar))
}

impl FrozenS4Block {
    /// `rest` is `[mix_w, mix_b, norm_gain, norm_bias]`.
    pub fn new(a: &Tensor, b: &Tensor, c: &Tensor, delta: f32, rest: [&Tensor; 4], pre_norm: bool) -> Result<Self> {
        let (h, n) = (c.shape()[0], c.shape()[1]);
        let groups = a.shape()[0];
        if a.shape() != [groups, n, n] || b.shape() != [groups, n] || (groups != 1 && groups != h) {
            return Err(Error::shape("frozen s4 block", a.shape(), c.shape()));
        }
        let mut a_bar_t = Vec::with_capacity(groups * n * n);
        let mut b_bar = Vec::with_capacity(groups * n);
        for g in 0..groups {
            let (at, bb) = discretize_group(
                &a.data()[g * n * n..(g + 1) * n * n],
                &b.data()[g * n..(g + 1) * n],
                n,
                delta as f64,
            )?;
            a_bar_t.extend(at);
            b_bar.extend(bb);
        }
        Ok(FrozenS4Block {
            h,
            n,
            groups,
            a_bar_t,
            b_bar,
            c: c.data().iter().map(|&v| v as f64).collect(),
            mix_w: rest[0].data().to_vec(),
            mix_b: rest[1].data().to_vec(),
            gain: rest[2].data().to_vec(),
            bias: rest[3].data().to_vec(),
            pre_norm,
        })
    }

    pub fn channels(&self) -> usize {
        self.h
    }

    pub fn zero_state(&self, rows: usize) -> S4BlockState {
        S4BlockState {
            rows,
            x: vec![0.0; rows * self.h * self.n],
        }
    }

    /// Advances every row of `state` by one input `u[rows, H]`.
    pub fn step(&self, state: &mut S4BlockState, u: &[f32]) -> Result<Vec<f32>> {
        let (h, n) = (self.h, self.n);
        if u.len() != state.rows * h || state.x.len() != state.rows * h * n {
            return Err(Error::Contract(format!(
                "block step: {} inputs for {} rows of width {h}",
                u.len(),
                state.rows
            )));
        }
        let x_in: Vec<f32> = if self.pre_norm {
            rows::layer_norm_rows(u, &self.gain, &self.bias, LN_EPS).0
        } else {
            u.to_vec()
        };
        let rh = state.rows * h;
        if self.groups == 1 {
            let next = dgemm_plain(rh, n, n, &state.x, &self.a_bar_t);
            state.x = next;
            for (i, &ui) in x_in.iter().enumerate() {
                let row = &mut state.x[i * n..(i + 1) * n];
                for (v, bb) in row.iter_mut().zip(&self.b_bar) {
                    *v += bb * ui as f64;
                }
            }
        } else {
            let mut next = vec![0.0f64; n];
            for (i, &ui) in x_in.iter().enumerate() {
                let g = i % h;
                let at = &self.a_bar_t[g * n * n..(g + 1) * n * n];
                let bb = &self.b_bar[g * n..(g + 1) * n];
                let row = &mut state.x[i * n..(i + 1) * n];
                for (j, nx) in next.iter_mut().enumerate() {
                    *nx = bb[j] * ui as f64;
                }
                for (k, &xk) in row.iter().enumerate() {
                    for (j, nx) in next.iter_mut().enumerate() {
                        *nx += xk * at[k * n + j];
                    }
                }
                row.copy_from_slice(&next);
            }
        }
        let mut y: Vec<f32> = (0..rh)
            .map(|i| {
                let c = &self.c[(i % h) * n..(i % h + 1) * n];
                c.iter().zip(&state.x[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum::<f64>() as f32
            })
            .collect();
        rows::gelu_in_place(&mut y);
        let m = rows::linear_rows(&y, h, &self.mix_w, 2 * h, Some(&self.mix_b));
        let mut out = rows::glu_rows(&m, 2 * h);
        rows::add_in_place(&mut out, u);
        if !self.pre_norm {
            out = rows::layer_norm_rows(&out, &self.gain, &self.bias, LN_EPS).0;
        }
        Ok(out)
    }
}

/// Runs one block over a single sequence `u[L, H]` in either evaluation path.
pub fn s4_block_forward(u: &Tensor, block: &S4Block, mode: BlockMode) -> Result<Tensor> {
    if u.rank() != 2 || u.shape()[1] != block.channels() {
        return Err(Error::shape("s4_block_forward", u.shape(), block.c.shape()));
    }
    match mode {
        BlockMode::Conv => {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape);
            let x = tape.constant(u.clone());
            let y = vars.forward(&mut tape, x, None, None)?;
            Ok(tape.value(y).clone())
        }
        BlockMode::Recurrent => {
            let frozen = block.freeze()?;
            let mut state = frozen.zero_state(1);
            let h = block.channels();
            let mut out = Vec::with_capacity(u.numel());
            for row in u.data().chunks(h) {
                out.extend(frozen.step(&mut state, row)?);
            }
            Tensor::new(u.shape(), out)
        }
    }
}

/// Bidirectional block over `u[L, H]`: the SSM of `fwd` on `u` plus the SSM
/// of `bwd` on the reversed sequence, summed, then `fwd`'s activation,
/// mixing layer and normalisation.
pub fn bidirectional_s4_forward(u: &Tensor, fwd: &S4Block, bwd: &S4Block) -> Result<Tensor> {
    if u.rank() != 2 || u.shape()[1] != fwd.channels() || bwd.channels() != fwd.channels() {
        return Err(Error::shape("bidirectional_s4_forward", u.shape(), fwd.c.shape()));
    }
    let mut tape = Tape::new();
    let mut vars = fwd.bind(&mut tape);
    vars.reverse = Some((
        tape.param(bwd.a.clone()),
        tape.param(bwd.b.clone()),
        tape.param(bwd.c.clone()),
    ));
    let x = tape.constant(u.clone());
    let y = vars.forward(&mut tape, x, None, None)?;
    Ok(tape.value(y).clone())
}
