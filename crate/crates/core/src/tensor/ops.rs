use super::kernels::{dgemm_plain, gemm, invert};
use super::rows;
use super::tape::{GradSink, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// 2-D matrix product `op(a) · op(b)`; `ta`/`tb` select transposed operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x[..., k] · w[k, n] + b[n]` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear bias", self.shape(b), &[n]));
            }
        }
        let out = rows::linear_rows(
            self.value(x).data(),
            k,
            self.value(w).data(),
            n,
            b.map(|b| self.value(b).data()),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }))
    }

    /// Batched product `a[G, m, k] · b[G, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(Tensor::new(&[g, m, n], out)?, Op::BatchMatMul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a * c).collect()).unwrap();
        self.push(t, Op::Scale(x, c))
    }

    /// Adds `b[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bd) {
                *o += bb;
            }
        }
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// Elementwise product with a constant factor (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        let v = self.value(x);
        if factor.len() != v.numel() {
            return Err(Error::shape("mul_const", v.shape(), &[factor.len()]));
        }
        let data = v.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push(t, Op::MulConst { x, factor }))
    }

    /// Selects rows (last-axis vectors) of `x`; `None` yields a zero row.
    pub fn gather_rows(
        &mut self,
        x: Var,
        rows: Vec<Option<usize>>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let nrows = v.rows();
        let out_rows: usize = out_shape[..out_shape.len() - 1].iter().product();
        if out_shape.last() != Some(&d) || out_rows != rows.len() {
            return Err(Error::shape("gather_rows", v.shape(), out_shape));
        }
        let mut out = vec![0.0; rows.len() * d];
        for (o, r) in out.chunks_mut(d).zip(&rows) {
            if let Some(r) = *r {
                if r >= nrows {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: r,
                        size: nrows,
                    });
                }
                o.copy_from_slice(&v.data()[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Gather { x, rows }))
    }

    /// Row lookup of token ids in an embedding table `[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let d = self.value(table).last_dim();
        let mut shape = lead.to_vec();
        shape.push(d);
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect(), &shape)
    }

    /// Stacks the rows of all parts (equal last dimension) into `[Σ rows, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(&[data.len() / d.max(1), d], data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    /// Batched matrix inverse over the last two axes.
    pub fn inverse(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("inverse", s, &[]));
        }
        let n = s[s.len() - 1];
        let mut out = Vec::with_capacity(v.numel());
        for m in v.data().chunks(n * n.max(1)) {
            let m64: Vec<f64> = m.iter().map(|&a| a as f64).collect();
            let inv = invert(n, &m64).map_err(|condition| Error::Singular { condition })?;
            out.extend(inv.iter().map(|&a| a as f32));
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::Inverse(x)))
    }

    /// Krylov sequence `[b, a·b, a²·b, …]` of length `len` per group:
    /// `a[G, N, N]`, `b[G, N]` → `[G, len, N]`.
    pub fn krylov(&mut self, a: Var, b: Var, len: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sa[1] != sa[2] || sb.len() != 2 || sb[0] != sa[0] || sb[1] != sa[1] {
            return Err(Error::shape("krylov", &sa, &sb));
        }
        let (g, n) = (sa[0], sa[1]);
        let mut out = vec![0.0f32; g * len * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let am: Vec<f64> = ad[gi * n * n..(gi + 1) * n * n].iter().map(|&x| x as f64).collect();
            let mut cur: Vec<f64> = bd[gi * n..(gi + 1) * n].iter().map(|&x| x as f64).collect();
            for l in 0..len {
                let dst = &mut out[(gi * len + l) * n..(gi * len + l + 1) * n];
                for (o, c) in dst.iter_mut().zip(&cur) {
                    *o = *c as f32;
                }
                if l + 1 < len {
                    cur = matvec(n, &am, &cur);
                }
            }
        }
        let t = Tensor::new(&[g, len, n], out)?;
        Ok(self.push(t, Op::Krylov { a, b }))
    }

    /// Per-channel readout of a Krylov sequence: `v[G, L, N]`, `c[H, N]` → `[L, H]`,
    /// where channel `h` reads group `0` when `G == 1` and group `h` when `G == H`.
    pub fn kernel_contract(&mut self, v: Var, c: Var) -> Result<Var> {
        let (sv, sc) = (self.shape(v).to_vec(), self.shape(c).to_vec());
        if sv.len() != 3 || sc.len() != 2 || sv[2] != sc[1] || !(sv[0] == 1 || sv[0] == sc[0]) {
            return Err(Error::shape("kernel_contract", &sv, &sc));
        }
        let (g, l, n, h) = (sv[0], sv[1], sv[2], sc[0]);
        let (vd, cd) = (self.value(v).data(), self.value(c).data());
        let mut out = vec![0.0; l * h];
        if g == 1 {
            gemm(l, n, h, vd, false, cd, true, &mut out, false);
        } else {
            for ch in 0..h {
                let crow = &cd[ch * n..(ch + 1) * n];
                for t in 0..l {
                    let vrow = &vd[(ch * l + t) * n..(ch * l + t + 1) * n];
                    out[t * h + ch] = super::kernels::dot(crow, vrow) as f32;
                }
            }
        }
        let t = Tensor::new(&[l, h], out)?;
        Ok(self.push(t, Op::KernelContract { v, c }))
    }
}

pub(crate) fn matvec(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

fn matvec_t(n: usize, a: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        let xi = x[i];
        if xi != 0.0 {
            for (o, aij) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                *o += aij * xi;
            }
        }
    }
    out
}

pub(super) fn matmul_backward(
    tape: &Tape,
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[f32],
    sink: &mut GradSink,
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (m, k) = if ta {
        (av.shape()[1], av.shape()[0])
    } else {
        (av.shape()[0], av.shape()[1])
    };
    let n = if tb { bv.shape()[0] } else { bv.shape()[1] };
    if sink.wants(a) {
        let buf = sink.buf(a);
        if !ta {
            gemm(m, n, k, g, false, bv.data(), !tb, buf, true);
        } else {
            gemm(k, n, m, bv.data(), tb, g, true, buf, true);
        }
    }
    if sink.wants(b) {
        let buf = sink.buf(b);
        if !tb {
            gemm(k, m, n, av.data(), !ta, g, false, buf, true);
        } else {
            gemm(n, m, k, g, true, av.data(), ta, buf, true);
        }
    }
}

pub(super) fn linear_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[f32],
    sink: &mut GradSink,
) {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let k = wv.shape()[0];
    let n = wv.shape()[1];
    let rows = xv.numel() / k.max(1);
    if sink.wants(x) {
        gemm(rows, n, k, g, false, wv.data(), true, sink.buf(x), true);
    }
    if sink.wants(w) {
        gemm(k, rows, n, xv.data(), true, g, false, sink.buf(w), true);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let mut acc = vec![0.0f64; n];
            for row in g.chunks(n) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v as f64;
                }
            }
            let d: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
            sink.add(b, &d);
        }
    }
}

pub(super) fn bmm_backward(tape: &Tape, a: Var, b: Var, g: &[f32], sink: &mut GradSink) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let n = bv.shape()[2];
    for i in 0..gn {
        let gi = &g[i * m * n..(i + 1) * m * n];
        if sink.wants(a) {
            let buf = &mut sink.buf(a)[i * m * k..(i + 1) * m * k];
            gemm(m, n, k, gi, false, &bv.data()[i * k * n..(i + 1) * k * n], true, buf, true);
        }
        if sink.wants(b) {
            let buf = &mut sink.buf(b)[i * k * n..(i + 1) * k * n];
            gemm(k, m, n, &av.data()[i * m * k..(i + 1) * m * k], true, gi, false, buf, true);
        }
    }
}

pub(super) fn mul_backward(tape: &Tape, a: Var, b: Var, g: &[f32], sink: &mut GradSink) {
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    if sink.wants(a) {
        let d: Vec<f32> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
        sink.add(a, &d);
    }
    if sink.wants(b) {
        let d: Vec<f32> = g.iter().zip(av).map(|(x, y)| x * y).collect();
        sink.add(b, &d);
    }
}

pub(super) fn add_bias_backward(x: Var, b: Var, g: &[f32], sink: &mut GradSink) {
    sink.add(x, g);
    if sink.wants(b) {
        let n = sink.buf(b).len();
        let mut acc = vec![0.0f64; n];
        for row in g.chunks(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v as f64;
            }
        }
        let d: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        sink.add(b, &d);
    }
}

pub(super) fn gather_backward(
    tape: &Tape,
    x: Var,
    rows: &[Option<usize>],
    g: &[f32],
    sink: &mut GradSink,
) {
    if !sink.wants(x) {
        return;
    }
    let d = tape.value(x).last_dim();
    let buf = sink.buf(x);
    for (gr, r) in g.chunks(d).zip(rows) {
        if let Some(r) = *r {
            for (b, v) in buf[r * d..(r + 1) * d].iter_mut().zip(gr) {
                *b += v;
            }
        }
    }
}

pub(super) fn concat_backward(tape: &Tape, parts: &[Var], g: &[f32], sink: &mut GradSink) {
    let mut off = 0;
    for &p in parts {
        let n = tape.value(p).numel();
        sink.add(p, &g[off..off + n]);
        off += n;
    }
}

/// `d X = −Yᵀ · G · Yᵀ` with `Y = X⁻¹`.
pub(super) fn inverse_backward(tape: &Tape, out: &Tensor, x: Var, g: &[f32], sink: &mut GradSink) {
    if !sink.wants(x) {
        return;
    }
    let s = tape.value(x).shape();
    let n = s[s.len() - 1];
    let mut d = Vec::with_capacity(g.len());
    for (y, gm) in out.data().chunks(n * n).zip(g.chunks(n * n)) {
        let yt: Vec<f64> = transpose(n, y);
        let g64: Vec<f64> = gm.iter().map(|&v| v as f64).collect();
        let t = dgemm_plain(n, n, n, &yt, &g64);
        let r = dgemm_plain(n, n, n, &t, &yt);
        d.extend(r.iter().map(|&v| -v as f32));
    }
    sink.add(x, &d);
}

fn transpose(n: usize, m: &[f32]) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j] as f64;
        }
    }
    t
}

pub(super) fn krylov_backward(
    tape: &Tape,
    out: &Tensor,
    a: Var,
    b: Var,
    g: &[f32],
    sink: &mut GradSink,
) {
    let s = out.shape();
    let (gn, len, n) = (s[0], s[1], s[2]);
    let ad = tape.value(a).data();
    let mut da = vec![0.0f32; gn * n * n];
    let mut db = vec![0.0f32; gn * n];
    for gi in 0..gn {
        let am: Vec<f64> = ad[gi * n * n..(gi + 1) * n * n].iter().map(|&x| x as f64).collect();
        let vecs = &out.data()[gi * len * n..(gi + 1) * len * n];
        let gs = &g[gi * len * n..(gi + 1) * len * n];
        let mut r = vec![0.0f64; n];
        let mut dam = vec![0.0f64; n * n];
        for l in (0..len).rev() {
            for (ri, gv) in r.iter_mut().zip(&gs[l * n..(l + 1) * n]) {
                *ri += *gv as f64;
            }
            if l == 0 {
                break;
            }
            let prev = &vecs[(l - 1) * n..l * n];
            for i in 0..n {
                let ri = r[i];
                if ri != 0.0 {
                    for (d, p) in dam[i * n..(i + 1) * n].iter_mut().zip(prev) {
                        *d += ri * *p as f64;
                    }
                }
            }
            r = matvec_t(n, &am, &r);
        }
        for (d, v) in da[gi * n * n..(gi + 1) * n * n].iter_mut().zip(&dam) {
            *d = *v as f32;
        }
        for (d, v) in db[gi * n..(gi + 1) * n].iter_mut().zip(&r) {
            *d = *v as f32;
        }
    }
    sink.add(a, &da);
    sink.add(b, &db);
}

pub(super) fn contract_backward(tape: &Tape, v: Var, c: Var, g: &[f32], sink: &mut GradSink) {
    let (vv, cv) = (tape.value(v), tape.value(c));
    let (gn, l, n) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
    let h = cv.shape()[0];
    if gn == 1 {
        if sink.wants(v) {
            gemm(l, h, n, g, false, cv.data(), false, sink.buf(v), true);
        }
        if sink.wants(c) {
            gemm(h, l, n, g, true, vv.data(), false, sink.buf(c), true);
        }
        return;
    }
    let (vd, cd) = (vv.data(), cv.data());
    if sink.wants(v) {
        let buf = sink.buf(v);
        for ch in 0..h {
            for t in 0..l {
                let gv = g[t * h + ch];
                for (b, cc) in buf[(ch * l + t) * n..(ch * l + t + 1) * n]
                    .iter_mut()
                    .zip(&cd[ch * n..(ch + 1) * n])
                {
                    *b += gv * cc;
                }
            }
        }
    }
    if sink.wants(c) {
        let buf = sink.buf(c);
        for ch in 0..h {
            let mut acc = vec![0.0f64; n];
            for t in 0..l {
                let gv = g[t * h + ch] as f64;
                for (a, vvv) in acc.iter_mut().zip(&vd[(ch * l + t) * n..(ch * l + t + 1) * n]) {
                    *a += gv * *vvv as f64;
                }
            }
            for (b, a) in buf[ch * n..(ch + 1) * n].iter_mut().zip(&acc) {
                *b += *a as f32;
            }
        }
    }
}
