//! Wengert tape: forward ops record themselves, `backward` replays them in
//! reverse and accumulates gradients additively in a fixed order.

use super::{pairwise_sum, GradMap, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf { name: Option<String> },
    Constant,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    Linear { x: usize, w: usize, b: usize },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Relu { a: usize },
    Softplus { a: usize },
    Sigmoid { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Recip { a: usize },
    Softmax { a: usize, axis: usize },
    MeanPool { a: usize, axis: usize },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { a: usize, start: usize },
    ScaleRows { w: usize, s: usize },
    ScaleCols { a: usize, t: usize },
    GaussianSample { mu: usize, sigma: usize, noise: Vec<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
}

/// Reverse-mode tape over [`Tensor`] values.
///
/// Graph construction and backward are single-threaded; values are immutable
/// once recorded.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(T::zero()) + x.abs().neg().exp().ln_1p()
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + x.neg().exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Register a differentiable input. Named leaves appear in the gradient
    /// map returned by [`Tape::backward`].
    pub fn leaf(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let ng = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf { name: Some(name.into()) }, ng))
    }

    /// Register a non-differentiable input (data, noise, constants).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(tensor, Op::Constant, false))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip_elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data: Vec<T> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.emit(op, out, rec, ng)
    }

    fn map_elementwise(&mut self, op: &'static str, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Result<Var> {
        let data: Vec<T> = self.values[a.0].data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let ng = self.needs_grad[a.0];
        self.emit(op, out, rec, ng)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map_elementwise("scale", a, |x| x * c, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.map_elementwise("add_scalar", a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("relu", a, |x| x.max(T::zero()), Op::Relu { a: a.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("softplus", a, stable_softplus, Op::Softplus { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("sigmoid", a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("ln", a, |x| x.ln(), Op::Ln { a: a.0 })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("sqrt", a, |x| x.sqrt(), Op::Sqrt { a: a.0 })
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.map_elementwise("recip", a, |x| x.recip(), Op::Recip { a: a.0 })
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = self.values[x.0].dims2();
        let (wk, m) = self.values[w.0].dims2();
        if k != wk || self.values[w.0].shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: self.values[w.0].shape().to_vec(),
            });
        }
        if self.values[b.0].numel() != m {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![m],
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.values[x.0].data(), self.values[w.0].data(), &mut out);
        let bias = self.values[b.0].data();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let ng = self.needs_grad[x.0] || self.needs_grad[w.0] || self.needs_grad[b.0];
        self.emit("linear", Tensor::new(vec![n, m], out)?, Op::Linear { x: x.0, w: w.0, b: b.0 }, ng)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.values[a.0].dims2();
        let (bk, m) = self.values[b.0].dims2();
        if k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.values[a.0].data(), self.values[b.0].data(), &mut out);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.emit("matmul", Tensor::new(vec![n, m], out)?, Op::Matmul { a: a.0, b: b.0 }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.values[a.0].dims2();
        let src = self.values[a.0].data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let ng = self.needs_grad[a.0];
        self.emit("transpose", Tensor::new(vec![m, n], out)?, Op::Transpose { a: a.0 }, ng)
    }

    // ── Structured ──────────────────────────────────────────────────

    /// Softmax along `axis` (0 for rank-1 vectors and matrix columns, 1 for
    /// matrix rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let val = &self.values[a.0];
        let rank1 = val.shape().len() == 1;
        if (rank1 && axis != 0) || axis > 1 {
            return Err(Error::InvalidArg(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                val.shape()
            )));
        }
        let (n, m) = val.dims2();
        let src = val.data();
        let mut out = vec![T::zero(); n * m];
        // rank-1 along axis 0 is a single row
        let row_major = rank1 || axis == 1;
        let (lanes, lane_len, stride, step) = if row_major { (n, m, m, 1) } else { (m, n, 1, m) };
        let mut scratch = vec![T::zero(); lane_len];
        for lane in 0..lanes {
            let base = lane * stride;
            let mut mx = T::neg_infinity();
            for i in 0..lane_len {
                mx = mx.max(src[base + i * step]);
            }
            for i in 0..lane_len {
                scratch[i] = (src[base + i * step] - mx).exp();
            }
            let denom = pairwise_sum(&scratch);
            for i in 0..lane_len {
                out[base + i * step] = scratch[i] / denom;
            }
        }
        let ng = self.needs_grad[a.0];
        self.emit("softmax", Tensor::new(val.shape().to_vec(), out)?, Op::Softmax { a: a.0, axis }, ng)
    }

    /// Mean over `axis` of a matrix: axis 0 pools rows into a `[1, m]` row,
    /// axis 1 pools columns into `[n, 1]`. Rank-1 input with axis 0 yields a
    /// scalar.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_pool", a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    fn reduce_axis(&mut self, op: &'static str, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let val = &self.values[a.0];
        let rank1 = val.shape().len() == 1;
        if (rank1 && axis != 0) || axis > 1 {
            return Err(Error::InvalidArg(format!("{op}: axis {axis} invalid for shape {:?}", val.shape())));
        }
        let (n, m) = val.dims2();
        let src = val.data();
        let (out, shape) = if rank1 {
            let s = pairwise_sum(src);
            (vec![if mean { s / T::from_f64(m as f64) } else { s }], vec![1])
        } else if axis == 0 {
            let mut out = vec![T::zero(); m];
            let mut scratch = vec![T::zero(); n];
            for j in 0..m {
                for i in 0..n {
                    scratch[i] = src[i * m + j];
                }
                let s = pairwise_sum(&scratch);
                out[j] = if mean { s / T::from_f64(n as f64) } else { s };
            }
            (out, vec![1, m])
        } else {
            let mut out = vec![T::zero(); n];
            for i in 0..n {
                let s = pairwise_sum(&src[i * m..(i + 1) * m]);
                out[i] = if mean { s / T::from_f64(m as f64) } else { s };
            }
            (out, vec![n, 1])
        };
        let ng = self.needs_grad[a.0];
        let rec = if mean { Op::MeanPool { a: a.0, axis } } else { Op::SumAxis { a: a.0, axis } };
        self.emit(op, Tensor::new(shape, out)?, rec, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = pairwise_sum(self.values[a.0].data());
        let ng = self.needs_grad[a.0];
        self.emit("sum_all", Tensor::scalar(s), Op::SumAll { a: a.0 }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.values[a.0].numel();
        let s = pairwise_sum(self.values[a.0].data()) / T::from_f64(n as f64);
        let ng = self.needs_grad[a.0];
        self.emit("mean_all", Tensor::scalar(s), Op::MeanAll { a: a.0 }, ng)
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArg("concat: needs parts and axis in {0,1}".into()));
        }
        let (n0, m0) = self.values[parts[0].0].dims2();
        let mut rows = n0;
        let mut cols = m0;
        for p in &parts[1..] {
            let (n, m) = self.values[p.0].dims2();
            if axis == 0 {
                if m != m0 {
                    return Err(Error::ShapeMismatch { op: "concat", lhs: vec![n0, m0], rhs: vec![n, m] });
                }
                rows += n;
            } else {
                if n != n0 {
                    return Err(Error::ShapeMismatch { op: "concat", lhs: vec![n0, m0], rhs: vec![n, m] });
                }
                cols += m;
            }
        }
        let mut out = vec![T::zero(); rows * cols];
        if axis == 0 {
            let mut at = 0;
            for p in parts {
                let d = self.values[p.0].data();
                out[at..at + d.len()].copy_from_slice(d);
                at += d.len();
            }
        } else {
            let mut col_at = 0;
            for p in parts {
                let (_, m) = self.values[p.0].dims2();
                let d = self.values[p.0].data();
                for i in 0..rows {
                    out[i * cols + col_at..i * cols + col_at + m].copy_from_slice(&d[i * m..(i + 1) * m]);
                }
                col_at += m;
            }
        }
        let ng = parts.iter().any(|p| self.needs_grad[p.0]);
        let rec = Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis };
        self.emit("concat", Tensor::new(vec![rows, cols], out)?, rec, ng)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.values[a.0].dims2();
        if start + len > m || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_cols: range {start}..{} out of {m} columns",
                start + len
            )));
        }
        let src = self.values[a.0].data();
        let mut out = vec![T::zero(); n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * m + start..i * m + start + len]);
        }
        let ng = self.needs_grad[a.0];
        self.emit("slice_cols", Tensor::new(vec![n, len], out)?, Op::SliceCols { a: a.0, start }, ng)
    }

    /// Row-wise scaling: `out[i, j] = w[i, j] * s[i]` with `s` a `[1, n]` row.
    pub fn scale_rows(&mut self, w: Var, s: Var) -> Result<Var> {
        let (n, m) = self.values[w.0].dims2();
        if self.values[s.0].dims2() != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.values[w.0].shape().to_vec(),
                rhs: self.values[s.0].shape().to_vec(),
            });
        }
        let sv = self.values[s.0].data();
        let wd = self.values[w.0].data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = wd[i * m + j] * sv[i];
            }
        }
        let ng = self.needs_grad[w.0] || self.needs_grad[s.0];
        self.emit("scale_rows", Tensor::new(vec![n, m], out)?, Op::ScaleRows { w: w.0, s: s.0 }, ng)
    }

    /// Column-wise scaling: `out[i, j] = a[i, j] * t[j]` with `t` a `[1, m]` row.
    pub fn scale_cols(&mut self, a: Var, t: Var) -> Result<Var> {
        let (n, m) = self.values[a.0].dims2();
        if self.values[t.0].dims2() != (1, m) {
            return Err(Error::ShapeMismatch {
                op: "scale_cols",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[t.0].shape().to_vec(),
            });
        }
        let tv = self.values[t.0].data();
        let ad = self.values[a.0].data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = ad[i * m + j] * tv[j];
            }
        }
        let ng = self.needs_grad[a.0] || self.needs_grad[t.0];
        self.emit("scale_cols", Tensor::new(vec![n, m], out)?, Op::ScaleCols { a: a.0, t: t.0 }, ng)
    }

    /// Reparameterized draw `mu + sigma * noise`. The caller owns the noise;
    /// it enters the graph as a constant.
    pub fn gaussian_sample(&mut self, mu: Var, sigma: Var, noise: &Tensor<T>) -> Result<Var> {
        self.same_shape("gaussian_sample", mu, sigma)?;
        if self.values[mu.0].shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_sample",
                lhs: self.values[mu.0].shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        if !self.values[sigma.0].data().iter().all(|&s| s > T::zero()) {
            return Err(Error::InvalidArg("gaussian_sample: sigma must be positive elementwise".into()));
        }
        if !noise.all_finite() {
            return Err(Error::NonFinite { op: "gaussian_sample" });
        }
        let data: Vec<T> = self.values[mu.0]
            .data()
            .iter()
            .zip(self.values[sigma.0].data())
            .zip(noise.data())
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let out = Tensor::new(self.values[mu.0].shape().to_vec(), data)?;
        let ng = self.needs_grad[mu.0] || self.needs_grad[sigma.0];
        let rec = Op::GaussianSample { mu: mu.0, sigma: sigma.0, noise: noise.data().to_vec() };
        self.emit("gaussian_sample", out, rec, ng)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.values[x.0].dims2();
        if self.values[gamma.0].numel() != d || self.values[beta.0].numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: self.values[gamma.0].shape().to_vec(),
            });
        }
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = vec![T::zero(); n * d];
        let mut scratch = vec![T::zero(); d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = pairwise_sum(row) * inv_d;
            for (s, &x) in scratch.iter_mut().zip(row) {
                let c = x - mean;
                *s = c * c;
            }
            let var = pairwise_sum(&scratch) * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let ng = self.needs_grad[x.0] || self.needs_grad[gamma.0] || self.needs_grad[beta.0];
        self.emit(
            "layer_norm",
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            ng,
        )
    }

    /// `softmax(q @ k^T / sqrt(d_k)) @ v` for a single head.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, dk) = self.values[q.0].dims2();
        let (nk, dk2) = self.values[k.0].dims2();
        let (nv, _) = self.values[v.0].dims2();
        if dk != dk2 || nk != nv {
            return Err(Error::ShapeMismatch {
                op: "scaled_dot_product_attention",
                lhs: self.values[k.0].shape().to_vec(),
                rhs: self.values[v.0].shape().to_vec(),
            });
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()))?;
        let probs = self.softmax(scaled, 1)?;
        self.matmul(probs, v)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every named
    /// `requires_grad` leaf; leaves the loss never touched get zero tensors.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        let loss_val = &self.values[loss.0];
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss_val.shape().to_vec() });
        }
        if !self.needs_grad[loss.0] {
            return Err(Error::DetachedGraph);
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.ops[i], Op::Leaf { .. }) {
                grads[i] = Some(g);
            }
        }

        let mut map = GradMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = op {
                if self.values[i].requires_grad() {
                    let t = match grads[i].take() {
                        Some(g) => Tensor::new(self.values[i].shape().to_vec(), g)?,
                        None => Tensor::zeros(self.values[i].shape().to_vec()),
                    };
                    map.insert(name.clone(), t);
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut Vec<Option<Vec<T>>>, node: usize, delta: &[T]) {
        if !self.needs_grad[node] {
            return;
        }
        match &mut grads[node] {
            Some(buf) => {
                for (a, &d) in buf.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => grads[node] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        match &self.ops[i] {
            Op::Leaf { .. } | Op::Constant => {}

            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g.iter().zip(self.values[*b].data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, &da);
                let db: Vec<T> = g.iter().zip(self.values[*a].data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *b, &db);
            }
            Op::Div { a, b } => {
                let bv = self.values[*b].data();
                let da: Vec<T> = g.iter().zip(bv).map(|(&x, &y)| x / y).collect();
                self.accumulate(grads, *a, &da);
                let av = self.values[*a].data();
                let db: Vec<T> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&x, (&a, &b))| -x * a / (b * b))
                    .collect();
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<T> = g.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g),

            Op::Linear { x, w, b } => {
                let (n, k) = self.values[*x].dims2();
                let (_, m) = self.values[*w].dims2();
                if self.needs_grad[*x] {
                    // dx = g @ w^T
                    let mut dx = vec![T::zero(); n * k];
                    gemm_bt(n, m, k, g, self.values[*w].data(), &mut dx);
                    self.accumulate(grads, *x, &dx);
                }
                if self.needs_grad[*w] {
                    // dw = x^T @ g
                    let mut dw = vec![T::zero(); k * m];
                    gemm_at(k, n, m, self.values[*x].data(), g, &mut dw);
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs_grad[*b] {
                    let mut db = vec![T::zero(); m];
                    let mut scratch = vec![T::zero(); n];
                    for j in 0..m {
                        for i in 0..n {
                            scratch[i] = g[i * m + j];
                        }
                        db[j] = pairwise_sum(&scratch);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Matmul { a, b } => {
                let (n, k) = self.values[*a].dims2();
                let (_, m) = self.values[*b].dims2();
                if self.needs_grad[*a] {
                    let mut da = vec![T::zero(); n * k];
                    gemm_bt(n, m, k, g, self.values[*b].data(), &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs_grad[*b] {
                    let mut db = vec![T::zero(); k * m];
                    gemm_at(k, n, m, self.values[*a].data(), g, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = self.values[i].dims2(); // output dims
                let mut da = vec![T::zero(); n * m];
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] = g[r * n + c];
                    }
                }
                self.accumulate(grads, *a, &da);
            }

            Op::Relu { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[*a].data())
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softplus { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[*a].data())
                    .map(|(&x, &v)| x * stable_sigmoid(v))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Ln { a } => {
                let da: Vec<T> = g.iter().zip(self.values[*a].data()).map(|(&x, &v)| x / v).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sqrt { a } => {
                let half = T::from_f64(0.5);
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&x, &s)| x * half / s)
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Recip { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&x, &y)| -x * y * y)
                    .collect();
                self.accumulate(grads, *a, &da);
            }

            Op::Softmax { a, axis } => {
                let val = &self.values[i];
                let rank1 = val.shape().len() == 1;
                let (n, m) = val.dims2();
                let s = val.data();
                let row_major = rank1 || *axis == 1;
                let (lanes, lane_len, stride, step) = if row_major { (n, m, m, 1) } else { (m, n, 1, m) };
                let mut da = vec![T::zero(); n * m];
                let mut scratch = vec![T::zero(); lane_len];
                for lane in 0..lanes {
                    let base = lane * stride;
                    for t in 0..lane_len {
                        scratch[t] = g[base + t * step] * s[base + t * step];
                    }
                    let dot = pairwise_sum(&scratch);
                    for t in 0..lane_len {
                        let idx = base + t * step;
                        da[idx] = s[idx] * (g[idx] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }

            Op::MeanPool { a, axis } | Op::SumAxis { a, axis } => {
                let mean = matches!(self.ops[i], Op::MeanPool { .. });
                let val = &self.values[*a];
                let rank1 = val.shape().len() == 1;
                let (n, m) = val.dims2();
                let mut da = vec![T::zero(); n * m];
                if rank1 {
                    let f = if mean { T::from_f64(1.0 / m as f64) } else { T::one() };
                    for d in da.iter_mut() {
                        *d = g[0] * f;
                    }
                } else if *axis == 0 {
                    let f = if mean { T::from_f64(1.0 / n as f64) } else { T::one() };
                    for i2 in 0..n {
                        for j in 0..m {
                            da[i2 * m + j] = g[j] * f;
                        }
                    }
                } else {
                    let f = if mean { T::from_f64(1.0 / m as f64) } else { T::one() };
                    for i2 in 0..n {
                        for j in 0..m {
                            da[i2 * m + j] = g[i2] * f;
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                let numel = self.values[*a].numel();
                let f = if matches!(self.ops[i], Op::MeanAll { .. }) {
                    T::from_f64(1.0 / numel as f64)
                } else {
                    T::one()
                };
                let da = vec![g[0] * f; numel];
                self.accumulate(grads, *a, &da);
            }

            Op::Concat { parts, axis } => {
                let (rows, cols) = self.values[i].dims2();
                if *axis == 0 {
                    let mut at = 0;
                    for p in parts {
                        let len = self.values[*p].numel();
                        self.accumulate(grads, *p, &g[at..at + len]);
                        at += len;
                    }
                } else {
                    let mut col_at = 0;
                    for p in parts {
                        let (pn, pm) = self.values[*p].dims2();
                        debug_assert_eq!(pn, rows);
                        let mut dp = vec![T::zero(); pn * pm];
                        for r in 0..rows {
                            dp[r * pm..(r + 1) * pm]
                                .copy_from_slice(&g[r * cols + col_at..r * cols + col_at + pm]);
                        }
                        self.accumulate(grads, *p, &dp);
                        col_at += pm;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (n, m) = self.values[*a].dims2();
                let (_, len) = self.values[i].dims2();
                let mut da = vec![T::zero(); n * m];
                for r in 0..n {
                    da[r * m + start..r * m + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, &da);
            }

            Op::ScaleRows { w, s } => {
                let (n, m) = self.values[*w].dims2();
                let sv = self.values[*s].data();
                if self.needs_grad[*w] {
                    let mut dw = vec![T::zero(); n * m];
                    for r in 0..n {
                        for c in 0..m {
                            dw[r * m + c] = g[r * m + c] * sv[r];
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if self.needs_grad[*s] {
                    let wd = self.values[*w].data();
                    let mut ds = vec![T::zero(); n];
                    let mut scratch = vec![T::zero(); m];
                    for r in 0..n {
                        for c in 0..m {
                            scratch[c] = g[r * m + c] * wd[r * m + c];
                        }
                        ds[r] = pairwise_sum(&scratch);
                    }
                    self.accumulate(grads, *s, &ds);
                }
            }
            Op::ScaleCols { a, t } => {
                let (n, m) = self.values[*a].dims2();
                let tv = self.values[*t].data();
                if self.needs_grad[*a] {
                    let mut da = vec![T::zero(); n * m];
                    for r in 0..n {
                        for c in 0..m {
                            da[r * m + c] = g[r * m + c] * tv[c];
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.needs_grad[*t] {
                    let av = self.values[*a].data();
                    let mut dt = vec![T::zero(); m];
                    let mut scratch = vec![T::zero(); n];
                    for c in 0..m {
                        for r in 0..n {
                            scratch[r] = g[r * m + c] * av[r * m + c];
                        }
                        dt[c] = pairwise_sum(&scratch);
                    }
                    self.accumulate(grads, *t, &dt);
                }
            }

            Op::GaussianSample { mu, sigma, noise } => {
                self.accumulate(grads, *mu, g);
                if self.needs_grad[*sigma] {
                    let ds: Vec<T> = g.iter().zip(noise).map(|(&x, &e)| x * e).collect();
                    self.accumulate(grads, *sigma, &ds);
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, d) = self.values[*x].dims2();
                let src = self.values[*x].data();
                let gam = self.values[*gamma].data();
                let inv_d = T::from_f64(1.0 / d as f64);
                let d_t = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); n * d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                let mut scratch = vec![T::zero(); d];
                for r in 0..n {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = pairwise_sum(row) * inv_d;
                    for (s, &v) in scratch.iter_mut().zip(row) {
                        let c = v - mean;
                        *s = c * c;
                    }
                    let var = pairwise_sum(&scratch) * inv_d;
                    let inv_std = (var + *eps).sqrt().recip();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = grow[j] * gam[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    let sum_dxhat = pairwise_sum(&dxhat);
                    for j in 0..d {
                        scratch[j] = dxhat[j] * xhat[j];
                    }
                    let sum_dxhat_xhat = pairwise_sum(&scratch);
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std * inv_d * (d_t * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
        }
    }
}

/// `c[m,n] = a[m,k] @ b[n,k]^T` without materializing the transpose.
fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // b is stored row-major [n, k]; treat as [k, n] via swapped strides
    unsafe {
        T::gemm_raw(
            m, k, n,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,n] = a[k,m]^T @ b[k,n]` without materializing the transpose.
fn gemm_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        T::gemm_raw(
            m, k, n,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gaussian_sample_zero_noise_is_mean() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::scalar(3.0)).unwrap();
        let sigma = tape.constant(Tensor::scalar(2.0)).unwrap();
        let z = tape.gaussian_sample(mu, sigma, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(tape.value(z).scalar_value(), 3.0);
    }

    #[test]
    fn gaussian_sample_rejects_nonpositive_sigma() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::scalar(0.0)).unwrap();
        let sigma = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(tape.gaussian_sample(mu, sigma, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn attention_with_single_key_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape
            .constant(Tensor::from_rows(3, 2, vec![5.0, -1.0, 0.3, 0.7, 100.0, 2.0]).unwrap())
            .unwrap();
        let k = tape.constant(Tensor::from_rows(1, 2, vec![0.1, 0.2]).unwrap()).unwrap();
        let v = tape.constant(Tensor::from_rows(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = tape.scaled_dot_product_attention(q, k, v).unwrap();
        // softmax over one element is 1, so every query receives the value row
        for row in tape.value(out).data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad())
            .unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_backward_zero_in_inactive_region() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", Tensor::scalar(-1.0).with_grad()).unwrap();
        let r = tape.relu(x).unwrap();
        let loss = tape.sum_all(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[0.0]);
    }

    #[test]
    fn reparameterization_gradients_are_upstream_and_upstream_times_noise() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf("mu", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap().with_grad()).unwrap();
        let sigma = tape.leaf("sigma", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad()).unwrap();
        let noise = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let z = tape.gaussian_sample(mu, sigma, &noise).unwrap();
        // loss = sum(w * z) so upstream grad is w
        let w = tape.constant(Tensor::new(vec![3], vec![2.0, 3.0, 4.0]).unwrap()).unwrap();
        let wz = tape.mul(w, z).unwrap();
        let loss = tape.sum_all(wz).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["mu"].data(), &[2.0, 3.0, 4.0]);
        assert_eq!(grads["sigma"].data(), &[2.0 * 0.5, 3.0 * -1.5, 4.0 * 2.0]);
    }

    #[test]
    fn shape_mismatch_error_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![3, 3])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(-1.0)).unwrap();
        let err = tape.ln(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln" }));
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_detached_graph() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad()).unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));

        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(1.0)).unwrap();
        let s = tape.sum_all(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedGraph)));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf("x", Tensor::scalar(1.0).with_grad()).unwrap();
        let _unused = tape.leaf("unused", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad()).unwrap();
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
        assert_eq!(grads["x"].data(), &[2.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.7).sin()).collect();
            let x = tape.constant(Tensor::from_rows(4, 6, data).unwrap()).unwrap();
            let s = tape.softmax(x, 1).unwrap();
            let p = tape.mean_pool(s, 0).unwrap();
            tape.value(p).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 7.0]).unwrap()).unwrap();
        let gamma = tape.constant(Tensor::new(vec![3], vec![1.0; 3]).unwrap()).unwrap();
        let beta = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(close(mean, 0.0, 1e-12) && close(var, 1.0, 1e-9), "{row:?}");
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(2, 1, vec![5.0, 6.0]).unwrap()).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.constant(Tensor::from_rows(2, 2, vec![7.0, 8.0, 9.0, 10.0]).unwrap()).unwrap();
        let rows = tape.concat(&[a, c], 0).unwrap();
        assert_eq!(tape.value(rows).dims2(), (4, 2));
    }
}
