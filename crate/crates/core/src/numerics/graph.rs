//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape. Parents always precede their
//! children, so walking the tape backwards is a topological order and each
//! node is visited exactly once.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ColumnSums(Var),
    Sum(Var),
    Relu(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CosineRows { a: Var, b: Var },
    SmoothMaxCols { x: Var, r: f64 },
    Gather { x: Var, idx: Vec<(usize, usize)> },
    Correlation { x: Var, valid: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    corrupt_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: perturbs the matmul backward rule so gradient checks can be
    /// shown to fail.
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![a, b],
            Op::CosineRows { a, b } => vec![a, b],
            Op::Affine { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::ColumnSums(x)
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Clamp { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::SmoothMaxCols { x, .. }
            | Op::Gather { x, .. }
            | Op::Correlation { x, .. } => vec![x],
        }
    }

    // ---- forward ops ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, n1), (m2, n2)) = (ta.dims(), tb.dims());
        if m != m2 {
            return Err(Error::dim("concat_cols", format!("{} vs {} rows", m, m2)));
        }
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::matrix(m, n1 + n2, data)?;
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Column-wise softmax, expressed through transposition.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.transpose(x)?;
        let s = self.softmax_rows(t)?;
        self.transpose(s)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(x), "log_softmax_rows")
    }

    /// Sum over rows: `[m×n] → [n]`.
    pub fn column_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::ColumnSums(x), "column_sums")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), "log")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Unit-normalizes each row. Rows with norm ≤ [`NORM_EPS`] become zero
    /// and pass no gradient; callers can detect them with
    /// [`degenerate_rows`].
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > NORM_EPS {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x, norms }, "normalize_rows")
    }

    /// Row-wise cosine similarity of two `[m×d]` matrices → `[m]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::dim(
                "cosine_rows",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ta.rows());
        for i in 0..ta.rows() {
            out.push(cosine(ta.row(i), tb.row(i))?);
        }
        self.push(Tensor::vector(out), Op::CosineRows { a, b }, "cosine_rows")
    }

    /// Cosine similarity of two vectors of equal length → scalar.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (nu, nv) = (self.value(u).len(), self.value(v).len());
        if nu != nv {
            return Err(Error::dim("cosine", format!("{} vs {}", nu, nv)));
        }
        let ur = self.reshape(u, vec![1, nu])?;
        let vr = self.reshape(v, vec![1, nv])?;
        let c = self.cosine_rows(ur, vr)?;
        self.reshape(c, vec![])
    }

    /// Per-column smooth maximum `(1/r)·log(mean_i exp(r·x_i))`: `[m×n] → [n]`.
    pub fn smooth_max_cols(&mut self, x: Var, r: f64) -> Result<Var> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Parameter(format!("LSE sharpness must be > 0, got {}", r)));
        }
        let t = self.value(x);
        let (m, n) = t.dims();
        if m == 0 {
            return Err(Error::EmptyBag("smooth maximum over zero instances".into()));
        }
        let out: Vec<f64> = (0..n).map(|c| smooth_max(&t.column(c), r)).collect();
        self.push(Tensor::vector(out), Op::SmoothMaxCols { x, r }, "smooth_max")
    }

    /// Smooth maximum of a vector → scalar.
    pub fn smooth_max_lse(&mut self, s: Var, r: f64) -> Result<Var> {
        let n = self.value(s).len();
        if n == 0 {
            return Err(Error::EmptyBag("smooth maximum of an empty vector".into()));
        }
        let col = self.reshape(s, vec![n, 1])?;
        let m = self.smooth_max_cols(col, r)?;
        self.reshape(m, vec![])
    }

    /// Picks entries `(row, col)` into a vector.
    pub fn gather(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims();
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::dim("gather", format!("({}, {}) outside [{}x{}]", r, c, m, n)));
        }
        let out: Vec<f64> = idx.iter().map(|&(r, c)| t.get(r, c)).collect();
        self.push(Tensor::vector(out), Op::Gather { x, idx }, "gather")
    }

    /// Pearson correlation between the columns of `x` (`[n×d] → [d×d]`),
    /// with identity rows for columns whose variance is at most
    /// [`NORM_EPS`].
    pub fn correlation(&mut self, x: Var) -> Result<Var> {
        let (out, valid) = correlation_with_mask(self.value(x))?;
        self.push(out, Op::Correlation { x, valid }, "correlation")
    }

    // ---- backward ------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward root with respect to `v` (zeros if `v`
    /// did not influence it).
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let out = &self.nodes[i].value;
        let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let mut ga = g.matmul(&self.value(b).transpose())?;
                    if self.corrupt_backward {
                        ga.data_mut().iter_mut().for_each(|v| *v *= 1.01);
                    }
                    contribs.push((a, ga));
                }
                if self.wants(b) {
                    contribs.push((b, self.value(a).transpose().matmul(g)?));
                }
            }
            &Op::Add(a, b) => {
                contribs.push((a, g.reshape(self.value(a).shape().to_vec())?));
                contribs.push((b, g.reshape(self.value(b).shape().to_vec())?));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    contribs.push((a, tb.zip_map(g, |y, gg| y * gg)?.reshape(ta.shape().to_vec())?));
                }
                if self.wants(b) {
                    contribs.push((b, ta.zip_map(g, |x, gg| x * gg)?.reshape(tb.shape().to_vec())?));
                }
            }
            &Op::Affine { x, scale } => contribs.push((x, g.map(|v| v * scale))),
            &Op::Transpose(x) => {
                contribs.push((x, g.transpose().reshape(self.value(x).shape().to_vec())?))
            }
            &Op::Reshape(x) => contribs.push((x, g.reshape(self.value(x).shape().to_vec())?)),
            &Op::ConcatCols(a, b) => {
                let n1 = self.value(a).cols();
                let n2 = self.value(b).cols();
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * n1);
                let mut gb = Vec::with_capacity(m * n2);
                for r in 0..m {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..n1]);
                    gb.extend_from_slice(&row[n1..]);
                }
                contribs.push((a, Tensor::new(self.value(a).shape().to_vec(), ga)?));
                contribs.push((b, Tensor::new(self.value(b).shape().to_vec(), gb)?));
            }
            &Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v = y[k] * (gr[k] - dot);
                    }
                }
                contribs.push((x, gx));
            }
            &Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for (k, v) in gx.row_mut(r).iter_mut().enumerate() {
                        *v = gr[k] - y[k].exp() * total;
                    }
                }
                contribs.push((x, gx));
            }
            &Op::ColumnSums(x) => {
                let (m, n) = self.value(x).dims();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(g.data());
                }
                contribs.push((x, Tensor::new(self.value(x).shape().to_vec(), data)?));
            }
            &Op::Sum(x) => contribs.push((x, Tensor::filled(self.value(x).shape(), g.item()))),
            &Op::Relu(x) => {
                contribs.push((x, self.value(x).zip_map(g, |v, gg| if v > 0.0 { gg } else { 0.0 })?))
            }
            &Op::Log(x) => contribs.push((x, self.value(x).zip_map(g, |v, gg| gg / v)?)),
            &Op::Clamp { x, lo, hi } => contribs.push((
                x,
                self.value(x)
                    .zip_map(g, |v, gg| if v >= lo && v <= hi { gg } else { 0.0 })?,
            )),
            Op::NormalizeRows { x, norms } => {
                let mut gx = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let row = gx.row_mut(r);
                    if n > NORM_EPS {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = (gr[k] - y[k] * dot) / n;
                        }
                    } else {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                contribs.push((*x, gx));
            }
            &Op::CosineRows { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for r in 0..ta.rows() {
                    let (u, v) = (ta.row(r), tb.row(r));
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let c = out.data()[r];
                    let gr = g.data()[r];
                    for k in 0..u.len() {
                        ga.row_mut(r)[k] = gr * (v[k] / (nu * nv) - c * u[k] / (nu * nu));
                        gb.row_mut(r)[k] = gr * (u[k] / (nu * nv) - c * v[k] / (nv * nv));
                    }
                }
                if self.wants(a) {
                    contribs.push((a, ga));
                }
                if self.wants(b) {
                    contribs.push((b, gb));
                }
            }
            &Op::SmoothMaxCols { x, r } => {
                let tx = self.value(x);
                let (m, n) = tx.dims();
                let mut gx = Tensor::zeros(tx.shape());
                for c in 0..n {
                    let s = out.data()[c];
                    for i in 0..m {
                        let w = (r * (tx.get(i, c) - s)).exp() / m as f64;
                        gx.set(i, c, g.data()[c] * w);
                    }
                }
                contribs.push((x, gx));
            }
            Op::Gather { x, idx } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    let cur = gx.get(r, c);
                    gx.set(r, c, cur + g.data()[k]);
                }
                contribs.push((*x, gx));
            }
            Op::Correlation { x, valid } => {
                contribs.push((*x, correlation_backward(self.value(*x), out, valid, g)?));
            }
        }
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
        Ok(())
    }
}

// ---- plain kernels shared with detached computations ------------------

/// Max-shifted softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Max-shifted `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `(1/r)·log[(1/n)·Σ exp(r·s_i)]`, max-shifted. Caller guarantees
/// `n ≥ 1` and `r > 0`.
pub fn smooth_max(s: &[f64], r: f64) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = s.iter().map(|v| (r * (v - m)).exp()).sum::<f64>() / s.len() as f64;
    m + mean.ln() / r
}

/// Cosine similarity; errors when either norm is at most [`NORM_EPS`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= NORM_EPS || nv <= NORM_EPS {
        return Err(Error::Degenerate(format!(
            "cosine of near-zero vector (norms {:e}, {:e})",
            nu, nv
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn centered_columns(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = x.dims();
    let mut zc = x.clone();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for (v, m) in zc.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    (zc, means)
}

/// Population covariance of the columns of `x` (`[d×d]`).
fn column_covariance(zc: &Tensor) -> Tensor {
    let n = zc.rows() as f64;
    let d = zc.cols();
    let mut cov = Tensor::zeros(&[d, d]);
    for p in 0..d {
        for q in p..d {
            let s: f64 = (0..zc.rows()).map(|i| zc.get(i, p) * zc.get(i, q)).sum::<f64>() / n;
            cov.set(p, q, s);
            cov.set(q, p, s);
        }
    }
    cov
}

pub(crate) fn correlation_with_mask(x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    let (n, d) = x.dims();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "correlation needs at least 2 instances, got {}",
            n
        )));
    }
    let (zc, _) = centered_columns(x);
    let cov = column_covariance(&zc);
    let valid: Vec<bool> = (0..d).map(|p| cov.get(p, p) > NORM_EPS).collect();
    let mut out = Tensor::zeros(&[d, d]);
    for p in 0..d {
        out.set(p, p, 1.0);
        if !valid[p] {
            continue;
        }
        for q in (p + 1)..d {
            if !valid[q] {
                continue;
            }
            let r = (cov.get(p, q) / (cov.get(p, p) * cov.get(q, q)).sqrt()).clamp(-1.0, 1.0);
            out.set(p, q, r);
            out.set(q, p, r);
        }
    }
    Ok((out, valid))
}

fn correlation_backward(x: &Tensor, out: &Tensor, valid: &[bool], g: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims();
    let (zc, _) = centered_columns(x);
    let cov = column_covariance(&zc);
    // dL/dC for R = D^{-1/2} C D^{-1/2} restricted to valid dimensions.
    let mut gc = Tensor::zeros(&[d, d]);
    for p in 0..d {
        if !valid[p] {
            continue;
        }
        for q in 0..d {
            if !valid[q] || p == q {
                continue;
            }
            let sp = cov.get(p, p).sqrt();
            let sq = cov.get(q, q).sqrt();
            gc.set(p, q, g.get(p, q) / (sp * sq));
        }
    }
    for p in 0..d {
        if !valid[p] {
            continue;
        }
        let mut acc = 0.0;
        for q in 0..d {
            if q == p || !valid[q] {
                continue;
            }
            acc += g.get(p, q) * out.get(p, q) + g.get(q, p) * out.get(q, p);
        }
        gc.set(p, p, -0.5 * acc / cov.get(p, p));
    }
    // C = Zcᵀ Zc / n  ⇒  dL/dZc = Zc (G + Gᵀ) / n.
    let sym = gc.zip_map(&gc.transpose(), |a, b| (a + b) / n as f64)?;
    let gzc = zc.matmul(&sym)?;
    // Centering projection.
    let (gx, _) = centered_columns(&gzc);
    gx.reshape(x.shape().to_vec())
}

/// Indices of rows that an earlier `normalize_rows` would have zeroed.
pub fn degenerate_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .filter(|&r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() <= NORM_EPS)
        .collect()
}
