//! Linear state-space layers: HiPPO-LegS initialisation, bilinear
//! discretisation, convolution kernels and the equivalent recurrent step.
//!
//! A single-input single-output channel evolves as
//!
//! ```text
//! x_k = Ā x_{k-1} + B̄ u_k
//! y_k = C̄ x_k
//! ```
//!
//! and, from a zero state, the whole output sequence equals the causal
//! convolution of `u` with the kernel `K̄ = (C̄B̄, C̄ĀB̄, …, C̄Ā^{L-1}B̄)`.

mod block;

pub use block::{
    bidirectional_s4_forward, s4_block_forward, BlockMode, FrozenS4Block, S4Block, S4BlockState,
    S4BlockVars,
};
pub(crate) use block::init_ssm;

use crate::error::{Error, Result};
use crate::tensor::kernels::{dgemm_plain, invert};
use crate::tensor::{Tape, Tensor, Var};

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|r| (r + 1..self.cols).all(|c| self.get(r, c) == 0.0))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        Matrix {
            rows: self.rows,
            cols: other.cols,
            data: dgemm_plain(self.rows, self.cols, other.cols, &self.data, &other.data),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn axpby(&self, a: f64, other: &Matrix, b: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

/// HiPPO-LegS state matrix of size `n×n` (0-indexed rows `r`, columns `c`):
/// `−√(2r+1)·√(2c+1)` below the diagonal, `−(r+1)` on it, zero above.
pub fn hippo_legs(n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Argument("HiPPO state size must be at least 1".into()));
    }
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            m.data[r * n + c] = if r > c {
                -((2 * r + 1) as f64).sqrt() * ((2 * c + 1) as f64).sqrt()
            } else {
                -((r + 1) as f64)
            };
        }
    }
    Ok(m)
}

/// Input vector paired with [`hippo_legs`]: `B[r] = √(2r+1)`.
pub fn hippo_legs_input(n: usize) -> Vec<f64> {
    (0..n).map(|r| ((2 * r + 1) as f64).sqrt()).collect()
}

/// Continuous single-channel SSM `(A, B, C)` with step `delta`. `D` is zero.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SsmParams {
    pub fn state_dim(&self) -> usize {
        self.a.rows
    }
}

/// Discrete single-channel SSM `(Ā, B̄, C̄)`.
#[derive(Clone, Debug)]
pub struct DiscretizedSsm {
    pub a_bar: Matrix,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

impl DiscretizedSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.rows
    }
}

/// Bilinear (Tustin) discretisation:
/// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹ΔB`, `C̄ = C`.
pub fn discretize_bilinear(p: &SsmParams) -> Result<DiscretizedSsm> {
    let n = p.state_dim();
    if p.a.cols != n || p.b.len() != n || p.c.len() != n {
        return Err(Error::shape("discretize_bilinear", &[n, p.a.cols], &[p.b.len(), p.c.len()]));
    }
    if !(p.delta > 0.0) {
        return Err(Error::Argument(format!("step size must be positive, got {}", p.delta)));
    }
    let eye = Matrix::identity(n);
    let half = p.delta / 2.0;
    let back = eye.axpby(1.0, &p.a, -half);
    let fwd = eye.axpby(1.0, &p.a, half);
    let inv = invert(n, &back.data).map_err(|condition| Error::Singular { condition })?;
    let inv = Matrix::from_vec(n, n, inv)?;
    let a_bar = inv.matmul(&fwd);
    let b_scaled: Vec<f64> = p.b.iter().map(|v| v * p.delta).collect();
    let b_bar = inv.matvec(&b_scaled);
    Ok(DiscretizedSsm {
        a_bar,
        b_bar,
        c_bar: p.c.clone(),
    })
}

/// `K̄[i] = C̄·Āⁱ·B̄` for `i < len`, by iterated multiplication.
pub fn materialize_kernel(d: &DiscretizedSsm, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Argument("kernel length must be at least 1".into()));
    }
    let mut v = d.b_bar.clone();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        out.push(d.c_bar.iter().zip(&v).map(|(a, b)| a * b).sum());
        if i + 1 < len {
            v = d.a_bar.matvec(&v);
        }
    }
    Ok(out)
}

/// A bank of `H` discrete channels; either every channel shares one
/// `(Ā, B̄)` pair or each channel has its own. `C̄` is always per channel.
#[derive(Clone, Debug)]
pub struct SsmBank {
    n: usize,
    channels: usize,
    groups: usize,
    /// `[groups, n, n]`
    a_bar: Vec<f64>,
    /// `[groups, n]`
    b_bar: Vec<f64>,
    /// `[channels, n]`
    c_bar: Vec<f64>,
}

impl SsmBank {
    pub fn from_channels(channels: &[DiscretizedSsm]) -> Result<Self> {
        let n = channels.first().map(|c| c.state_dim()).unwrap_or(0);
        let mut bank = SsmBank {
            n,
            channels: channels.len(),
            groups: channels.len(),
            a_bar: Vec::new(),
            b_bar: Vec::new(),
            c_bar: Vec::new(),
        };
        for ch in channels {
            if ch.state_dim() != n {
                return Err(Error::shape("ssm bank", &[n], &[ch.state_dim()]));
            }
            bank.a_bar.extend(&ch.a_bar.data);
            bank.b_bar.extend(&ch.b_bar);
            bank.c_bar.extend(&ch.c_bar);
        }
        Ok(bank)
    }

    /// Bank with one shared `(Ā, B̄)` and per-channel `C̄` rows `[channels, n]`.
    pub fn shared(a_bar: &Matrix, b_bar: &[f64], c_bar: &[f64]) -> Result<Self> {
        let n = a_bar.rows;
        if b_bar.len() != n || c_bar.len() % n.max(1) != 0 {
            return Err(Error::shape("ssm bank", &[n], &[b_bar.len(), c_bar.len()]));
        }
        Ok(SsmBank {
            n,
            channels: c_bar.len() / n.max(1),
            groups: 1,
            a_bar: a_bar.data.clone(),
            b_bar: b_bar.to_vec(),
            c_bar: c_bar.to_vec(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    fn group_of(&self, h: usize) -> usize {
        if self.groups == 1 {
            0
        } else {
            h
        }
    }

    pub fn channel(&self, h: usize) -> DiscretizedSsm {
        let (n, g) = (self.n, self.group_of(h));
        DiscretizedSsm {
            a_bar: Matrix::from_vec(n, n, self.a_bar[g * n * n..(g + 1) * n * n].to_vec()).unwrap(),
            b_bar: self.b_bar[g * n..(g + 1) * n].to_vec(),
            c_bar: self.c_bar[h * n..(h + 1) * n].to_vec(),
        }
    }

    /// Kernel matrix `[len, channels]`.
    pub fn kernels(&self, len: usize) -> Result<Tensor> {
        let mut out = vec![0.0f32; len * self.channels];
        for h in 0..self.channels {
            let k = materialize_kernel(&self.channel(h), len)?;
            for (t, v) in k.iter().enumerate() {
                out[t * self.channels + h] = *v as f32;
            }
        }
        Tensor::new(&[len, self.channels], out)
    }

    pub fn zero_state(&self) -> SsmState {
        SsmState {
            channels: self.channels,
            n: self.n,
            x: vec![0.0; self.channels * self.n],
        }
    }
}

/// Recurrent state `x_k`, one `N`-vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    channels: usize,
    n: usize,
    x: Vec<f64>,
}

impl SsmState {
    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.n)
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }
}

/// One exact recurrence step for every channel: `x ← Āx + B̄u_k`, `y_k = C̄x`.
pub fn forward_recurrent(state: &mut SsmState, bank: &SsmBank, u_k: &[f64]) -> Result<Vec<f64>> {
    if state.shape() != (bank.channels, bank.n) || u_k.len() != bank.channels {
        return Err(Error::Contract(format!(
            "state {:?} / input {} do not match a bank of {} channels with N={}",
            state.shape(),
            u_k.len(),
            bank.channels,
            bank.n
        )));
    }
    let n = bank.n;
    let mut y = Vec::with_capacity(bank.channels);
    let mut next = vec![0.0f64; n];
    for (h, &u) in u_k.iter().enumerate() {
        let g = bank.group_of(h);
        let a = &bank.a_bar[g * n * n..(g + 1) * n * n];
        let b = &bank.b_bar[g * n..(g + 1) * n];
        let x = &mut state.x[h * n..(h + 1) * n];
        for (r, nx) in next.iter_mut().enumerate() {
            *nx = a[r * n..(r + 1) * n].iter().zip(x.iter()).map(|(p, q)| p * q).sum::<f64>()
                + b[r] * u;
        }
        x.copy_from_slice(&next);
        y.push(bank.c_bar[h * n..(h + 1) * n].iter().zip(x.iter()).map(|(p, q)| p * q).sum());
    }
    Ok(y)
}

/// Whole-sequence output `y[:, h] = K̄_h * u[:, h]` for `u[L, H]` via one
/// causal convolution per channel.
pub fn forward_conv(u: &Tensor, bank: &SsmBank) -> Result<Tensor> {
    if u.rank() != 2 || u.shape()[1] != bank.channels {
        return Err(Error::shape("forward_conv", u.shape(), &[bank.channels]));
    }
    let len = u.shape()[0];
    let k = bank.kernels(len)?;
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let kv = tape.constant(k);
    let y = tape.fft_causal_conv(uv, kv)?;
    Ok(tape.value(y).clone())
}

/// Runs the recurrence from a zero state over every row of `u[L, H]`.
pub fn run_recurrent(u: &Tensor, bank: &SsmBank) -> Result<Tensor> {
    let mut state = bank.zero_state();
    let h = bank.channels;
    let mut out = Vec::with_capacity(u.numel());
    for row in u.data().chunks(h) {
        let uk: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        out.extend(forward_recurrent(&mut state, bank, &uk)?.iter().map(|&v| v as f32));
    }
    Tensor::new(u.shape(), out)
}

/// Differentiable bilinear discretisation of grouped parameters
/// `a[G, N, N]`, `b[G, N]`; returns `(Ā[G, N, N], B̄[G, N])`.
pub fn discretize_on_tape(tape: &mut Tape, a: Var, b: Var, delta: f32) -> Result<(Var, Var)> {
    let s = tape.shape(a).to_vec();
    if s.len() != 3 || s[1] != s[2] || tape.shape(b) != [s[0], s[1]] {
        return Err(Error::shape("discretize_on_tape", &s, tape.shape(b)));
    }
    let (g, n) = (s[0], s[1]);
    let mut eye = Tensor::zeros(&[g, n, n]);
    for gi in 0..g {
        for i in 0..n {
            eye.data_mut()[gi * n * n + i * n + i] = 1.0;
        }
    }
    let eye = tape.constant(eye);
    let half = tape.scale(a, delta / 2.0);
    let back = tape.sub(eye, half)?;
    let fwd = tape.add(eye, half)?;
    let inv = tape.inverse(back)?;
    let a_bar = tape.batch_matmul(inv, fwd)?;
    let bs = tape.scale(b, delta);
    let bs = tape.reshape(bs, &[g, n, 1])?;
    let b_bar = tape.batch_matmul(inv, bs)?;
    let b_bar = tape.reshape(b_bar, &[g, n])?;
    Ok((a_bar, b_bar))
}

/// Differentiable kernel `[len, H]` from `Ā[G, N, N]`, `B̄[G, N]`, `C[H, N]`.
pub fn kernel_on_tape(tape: &mut Tape, a_bar: Var, b_bar: Var, c: Var, len: usize) -> Result<Var> {
    let v = tape.krylov(a_bar, b_bar, len)?;
    tape.kernel_contract(v, c)
}

/// Settings for comparing the convolution and recurrent views on random
/// HiPPO-initialised banks.
#[derive(Clone, Debug, PartialEq)]
pub struct DualityCheck {
    pub n: usize,
    pub channels: usize,
    pub len: usize,
    pub trials: usize,
    pub seed: u64,
    pub delta: f64,
    /// Standard deviation of the Gaussian noise added to `A` and `B`.
    pub perturb: f64,
    /// Multiplies every `Ā` by this factor after discretisation; values
    /// above one push the spectral radius past one.
    pub corrupt: Option<f64>,
}

impl Default for DualityCheck {
    fn default() -> Self {
        DualityCheck {
            n: 64,
            channels: 8,
            len: 128,
            trials: 20,
            seed: 0,
            delta: 1.0,
            perturb: 0.05,
            corrupt: None,
        }
    }
}

/// Largest `|conv − recurrent|` over outputs, one value per trial.
pub fn duality_residuals(cfg: &DualityCheck) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    if cfg.n == 0 || cfg.channels == 0 || cfg.len == 0 {
        return Err(Error::Argument("state size, channels and length must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gauss = move |s: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    };
    let hippo = hippo_legs(cfg.n)?;
    let b0 = hippo_legs_input(cfg.n);
    let mut out = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let mut chans = Vec::with_capacity(cfg.channels);
        for _ in 0..cfg.channels {
            let mut a = hippo.clone();
            a.data.iter_mut().for_each(|v| *v += gauss(cfg.perturb));
            let p = SsmParams {
                a,
                b: b0.iter().map(|v| v + gauss(cfg.perturb)).collect(),
                c: (0..cfg.n).map(|_| gauss(1.0 / (cfg.n as f64).sqrt())).collect(),
                delta: cfg.delta,
            };
            let mut d = discretize_bilinear(&p)?;
            if let Some(f) = cfg.corrupt {
                d.a_bar.data.iter_mut().for_each(|v| *v *= f);
            }
            chans.push(d);
        }
        let bank = SsmBank::from_channels(&chans)?;
        let u: Vec<f32> = (0..cfg.len * cfg.channels).map(|_| gauss(1.0) as f32).collect();
        let u = Tensor::new(&[cfg.len, cfg.channels], u)?;
        let conv = forward_conv(&u, &bank)?;
        let rec = run_recurrent(&u, &bank)?;
        let diff = conv
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| if a.is_finite() && b.is_finite() { (*a as f64 - *b as f64).abs() } else { f64::NAN })
            .fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) });
        out.push(diff);
    }
    Ok(out)
}
