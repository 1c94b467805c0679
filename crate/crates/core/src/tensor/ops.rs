//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::tape::{OpCategory, Var};
use super::{check_same, Result, Tensor, TensorError};

// ---------------------------------------------------------------------------
// raw kernels

/// `a (m×k) · b (k×n)`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (r * c);
    let mut data = vec![0.0; t.numel()];
    let src = t.data();
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                data[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor { shape, data }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn row_vector_check(op: &'static str, a: &Tensor, r: &Tensor) -> Result<()> {
    if r.rank() != 1 || r.numel() != a.cols() || a.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: r.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ---------------------------------------------------------------------------
// differentiable ops

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let y_rc = Rc::new(y.clone());
        let tape = self.tape;
        tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = g.clone();
                for ((o, &xv), &yv) in out.data.iter_mut().zip(x.data()).zip(y_rc.data()) {
                    *o *= df(xv, yv);
                }
                vec![out]
            })
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("add", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x + y);
        Ok(self
            .tape
            .record(y, &[self, other], || Box::new(|g: &Tensor| vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("sub", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.record(y, &[self, other], || {
            Box::new(|g: &Tensor| vec![g.clone(), g.map(|v| -v)])
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same("mul", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.record(y, &[self, other], move || {
            Box::new(move |g: &Tensor| vec![g.zip_map(&b, |g, b| g * b), g.zip_map(&a, |g, a| g * a)])
        }))
    }

    /// Product of two single-element tensors, or a tensor by a one-element tensor.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_var",
                lhs: a.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let y = a.map(|v| v * k);
        let s_shape = sv.shape().to_vec();
        Ok(self.tape.record(y, &[self, s], move || {
            Box::new(move |g: &Tensor| {
                let ds: f64 = g.data().iter().zip(a.data()).map(|(g, a)| g * a).sum();
                vec![g.map(|v| v * k), Tensor::new(&s_shape, vec![ds]).expect("scalar")]
            })
        }))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let y = self.value().map(|v| v * k);
        self.tape
            .record(y, &[self], move || Box::new(move |g: &Tensor| vec![g.map(|v| v * k)]))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let y = self.value().map(|v| v + k);
        self.tape.record(y, &[self], || Box::new(|g: &Tensor| vec![g.clone()]))
    }

    /// Adds a rank-1 vector to every last-axis row.
    pub fn add_row(self, r: Var<'t>) -> Result<Var<'t>> {
        let (a, rv) = (self.value(), r.value());
        row_vector_check("add_row", &a, &rv)?;
        let c = a.cols();
        let mut y = (*a).clone();
        for row in y.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        Ok(self.tape.record(y, &[self, r], move || {
            Box::new(move |g: &Tensor| {
                let mut gr = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (s, v) in gr.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                vec![g.clone(), Tensor::vector(gr)]
            })
        }))
    }

    /// Multiplies every last-axis row elementwise by a rank-1 vector.
    pub fn mul_row(self, r: Var<'t>) -> Result<Var<'t>> {
        let (a, rv) = (self.value(), r.value());
        row_vector_check("mul_row", &a, &rv)?;
        let c = a.cols();
        let mut y = (*a).clone();
        for row in y.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(rv.data()) {
                *v *= b;
            }
        }
        Ok(self.tape.record(y, &[self, r], move || {
            Box::new(move |g: &Tensor| {
                let mut ga = g.clone();
                let mut gr = vec![0.0; c];
                for (grow, arow) in ga.data.chunks_mut(c).zip(a.data().chunks(c)) {
                    for j in 0..c {
                        gr[j] += grow[j] * arow[j];
                        grow[j] *= rv.data()[j];
                    }
                }
                vec![ga, Tensor::vector(gr)]
            })
        }))
    }

    /// Matrix product over the last two axes.
    ///
    /// The left operand may be rank 2 or 3; a rank-2 right operand is shared
    /// across the batch, a rank-3 one is paired batch-wise.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() < 2 || b.rank() < 2 {
            return Err(mismatch());
        }
        let k = a.cols();
        let bs = b.shape();
        let (bk, n) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        if bk != k {
            return Err(mismatch());
        }
        let mut out_shape = a.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        if b.rank() == 2 {
            let m = a.rows();
            self.tape.count((m * k * n) as u64);
            let y = Tensor::new(&out_shape, mm(a.data(), b.data(), m, k, n))?;
            return Ok(self.tape.record(y, &[self, other], move || {
                Box::new(move |g: &Tensor| {
                    let ga = Tensor {
                        shape: a.shape().to_vec(),
                        data: mm_nt(g.data(), b.data(), m, n, k),
                    };
                    let gb = Tensor {
                        shape: b.shape().to_vec(),
                        data: mm_tn(a.data(), g.data(), m, k, n),
                    };
                    vec![ga, gb]
                })
            }));
        }
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != bs[0] {
            return Err(mismatch());
        }
        let (batch, m) = (a.shape()[0], a.shape()[1]);
        self.tape.count((batch * m * k * n) as u64);
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(mm(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let y = Tensor::new(&out_shape, data)?;
        Ok(self.tape.record(y, &[self, other], move || {
            Box::new(move |g: &Tensor| {
                let mut ga = Vec::with_capacity(a.numel());
                let mut gb = Vec::with_capacity(b.numel());
                for i in 0..batch {
                    let gs = &g.data()[i * m * n..(i + 1) * m * n];
                    ga.extend(mm_nt(gs, &b.data()[i * k * n..(i + 1) * k * n], m, n, k));
                    gb.extend(mm_tn(&a.data()[i * m * k..(i + 1) * m * k], gs, m, k, n));
                }
                vec![
                    Tensor { shape: a.shape().to_vec(), data: ga },
                    Tensor { shape: b.shape().to_vec(), data: gb },
                ]
            })
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("needs rank ≥ 2, got {:?}", a.shape()),
            });
        }
        let y = transpose_last2(&a);
        Ok(self
            .tape
            .record(y, &[self], || Box::new(|g: &Tensor| vec![transpose_last2(g)])))
    }

    /// Concatenates along the first axis; trailing dims must agree.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
            sizes.push((v.shape().to_vec(), v.numel()));
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let y = Tensor::new(&shape, data)?;
        Ok(tape.record(y, parts, move || {
            Box::new(move |g: &Tensor| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|(s, n)| {
                        let t = Tensor { shape: s.clone(), data: g.data()[off..off + n].to_vec() };
                        off += n;
                        t
                    })
                    .collect()
            })
        }))
    }

    /// Concatenates rank-2 tensors along the last axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let (rows, _) = require_rank2("concat_cols", &values[0])?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = require_rank2("concat_cols", v)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let y = Tensor::new(&[rows, total], data)?;
        Ok(tape.record(y, parts, move || {
            Box::new(move |g: &Tensor| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        off += w;
                        Tensor { shape: vec![rows, w], data: d }
                    })
                    .collect()
            })
        }))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = require_rank2("slice_rows", &a)?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange { op: "slice_rows", index: start + len, extent: r });
        }
        let y = Tensor::new(&[len, c], a.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = Tensor::zeros(&[r, c]);
                out.data[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![out]
            })
        }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = require_rank2("slice_cols", &a)?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange { op: "slice_cols", index: start + len, extent: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        let y = Tensor::new(&[r, len], data)?;
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    out.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                vec![out]
            })
        }))
    }

    /// Selects rows of a rank-2 tensor; repeated indices are allowed.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = require_rank2("gather_rows", &a)?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, extent: r });
            }
            data.extend_from_slice(a.row(i));
        }
        let y = Tensor::new(&[indices.len(), c], data)?;
        let idx = indices.to_vec();
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = Tensor::zeros(&[r, c]);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                vec![out]
            })
        }))
    }

    /// Writes row `k` of `self` into row `indices[k]` of a zero `n`-row buffer.
    pub fn scatter_rows(self, indices: &[usize], n: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = require_rank2("scatter_rows", &a)?;
        if indices.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut y = Tensor::zeros(&[n, c]);
        for (k, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { op: "scatter_rows", index: i, extent: n });
            }
            for (o, v) in y.row_mut(i).iter_mut().zip(a.row(k)) {
                *o += v;
            }
        }
        let idx = indices.to_vec();
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut data = Vec::with_capacity(r * c);
                for &i in &idx {
                    data.extend_from_slice(g.row(i));
                }
                vec![Tensor { shape: vec![r, c], data }]
            })
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let y = Tensor::scalar(a.sum());
        self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| vec![Tensor::full(&shape, g.item())])
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut y = (*a).clone();
        for row in y.data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yc = Rc::new(y.clone());
        self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = g.clone();
                for (orow, yrow) in out.data.chunks_mut(c).zip(yc.data().chunks(c)) {
                    let dot: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (o, &yv) in orow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                vec![out]
            })
        })
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut y = (*a).clone();
        let mut inv_std = Vec::with_capacity(a.rows());
        for row in y.data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let yc = Rc::new(y.clone());
        self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = g.clone();
                for ((orow, yrow), is) in out.data.chunks_mut(c).zip(yc.data().chunks(c)).zip(&inv_std) {
                    let gm = orow.iter().sum::<f64>() / c as f64;
                    let gy = orow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for (o, &yv) in orow.iter_mut().zip(yrow) {
                        *o = is * (*o - gm - yv * gy);
                    }
                }
                vec![out]
            })
        })
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Rounds to the nearest integer; the backward pass is the identity.
    pub fn round_ste(self) -> Result<Var<'t>> {
        let y = self.tape.ste_forward(&self.value())?;
        Ok(self.tape.record(y, &[self], || Box::new(|g: &Tensor| vec![g.clone()])))
    }

    /// Expands keyframe rows to `n` dense rows by linear interpolation in the
    /// row index. `indices` must be strictly increasing, start at 0 and end at
    /// `n - 1`; keyframe rows are copied unchanged.
    pub fn interpolate_rows(self, indices: &[usize], n: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (k, c) = require_rank2("interpolate_rows", &a)?;
        let valid = k == indices.len()
            && k >= 1
            && indices[0] == 0
            && indices[k - 1] + 1 == n
            && indices.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(TensorError::Invalid {
                op: "interpolate_rows",
                msg: format!("keyframe indices {indices:?} do not span 0..{n} for {k} rows"),
            });
        }
        let mut y = Tensor::zeros(&[n, c]);
        let mut ops = 0u64;
        for (slot, &i) in indices.iter().enumerate() {
            y.row_mut(i).copy_from_slice(a.row(slot));
            if slot + 1 == k {
                break;
            }
            let j = indices[slot + 1];
            let span = (j - i) as f64;
            for m in i + 1..j {
                let (wl, wr) = ((j - m) as f64, (m - i) as f64);
                let (fl, fr) = (a.row(slot), a.row(slot + 1));
                for (col, out) in y.row_mut(m).iter_mut().enumerate() {
                    *out = (wl * fl[col] + wr * fr[col]) / span;
                }
                ops += 2 * c as u64;
            }
        }
        self.tape.count_in(OpCategory::Interpolation, ops);
        let idx = indices.to_vec();
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = Tensor::zeros(&[k, c]);
                for (slot, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(slot).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                    if slot + 1 == k {
                        break;
                    }
                    let j = idx[slot + 1];
                    let span = (j - i) as f64;
                    for m in i + 1..j {
                        let (wl, wr) = ((j - m) as f64 / span, (m - i) as f64 / span);
                        for col in 0..c {
                            let gv = g.get(m, col);
                            out.data[slot * c + col] += wl * gv;
                            out.data[(slot + 1) * c + col] += wr * gv;
                        }
                    }
                }
                vec![out]
            })
        }))
    }

    /// Row-wise ℓ₁ clipping: row `k` becomes `w_k · min(1, bound / ‖w_k‖₁)`.
    /// `bound` is a one-element tensor; zero rows pass through.
    pub fn l1_row_clip(self, bound: Var<'t>) -> Result<Var<'t>> {
        let w = self.value();
        let bv = bound.value();
        let (r, c) = require_rank2("l1_row_clip", &w)?;
        if bv.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "l1_row_clip",
                lhs: w.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let s = bv.item();
        let norms: Vec<f64> = (0..r).map(|i| w.row(i).iter().map(|v| v.abs()).sum()).collect();
        let mut y = (*w).clone();
        for (i, &n) in norms.iter().enumerate() {
            if n > s {
                let k = s / n;
                for v in y.row_mut(i) {
                    *v *= k;
                }
            }
        }
        let b_shape = bv.shape().to_vec();
        Ok(self.tape.record(y, &[self, bound], move || {
            Box::new(move |g: &Tensor| {
                let mut gw = g.clone();
                let mut gs = 0.0;
                for (i, &n) in norms.iter().enumerate() {
                    if n <= s {
                        continue;
                    }
                    let wr = w.row(i);
                    let gr = g.row(i);
                    let gdotw: f64 = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    gs += gdotw / n;
                    let out = gw.row_mut(i);
                    for j in 0..c {
                        let sign = if wr[j] > 0.0 {
                            1.0
                        } else if wr[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        out[j] = s / n * gr[j] - s / (n * n) * gdotw * sign;
                    }
                }
                vec![gw, Tensor::new(&b_shape, vec![gs]).expect("scalar")]
            })
        }))
    }

    /// Matrix ∞-norm (largest row ℓ₁ norm) as a scalar; the subgradient
    /// flows to the first maximizing row.
    pub fn max_row_l1(self) -> Result<Var<'t>> {
        let w = self.value();
        let (r, c) = require_rank2("max_row_l1", &w)?;
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..r {
            let n: f64 = w.row(i).iter().map(|v| v.abs()).sum();
            if n > best.1 {
                best = (i, n);
            }
        }
        let y = Tensor::scalar(best.1.max(0.0));
        Ok(self.tape.record(y, &[self], move || {
            Box::new(move |g: &Tensor| {
                let mut out = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    let v = w.get(best.0, j);
                    out.data[best.0 * c + j] = g.item() * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                }
                vec![out]
            })
        }))
    }
}
