//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! assigned in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Parameters are
//! borrowed into the graph, never copied.

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, axis_strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RowScale(Var, Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing `t`.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn trainable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Copy of `v`'s value as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", ta.shape(), tb.shape());
        }
        let mut out = ta.clone();
        out.data_mut()
            .iter_mut()
            .zip(tb.data())
            .for_each(|(o, v)| *o += v);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `m`.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tb.numel() != tm.cols() {
            return shape_err("add_row", tm.shape(), tb.shape());
        }
        let mut out = tm.clone();
        let c = tm.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += tb.data()[i % c];
        }
        Ok(self.derived(out, Op::AddRow(m, bias), &[m, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mul", ta.shape(), tb.shape());
        }
        let mut out = ta.clone();
        out.data_mut()
            .iter_mut()
            .zip(tb.data())
            .for_each(|(o, v)| *o *= v);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale · x + offset`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = scale * *v + offset);
        self.derived(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(x))?;
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.derived(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, shift: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            tensor::layer_norm_parts(self.value(x), self.value(gamma), self.value(shift), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            shift,
            xhat,
            rstd,
        };
        Ok(self.derived(out, op, &[x, gamma, shift]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        self.derived(out, Op::Gelu(x), &[x])
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_parts(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(rows)?;
        Ok(self.derived(out, Op::SelectRows(x, rows.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() || len == 0 {
            return shape_err("slice_cols", t.shape(), &[start, len]);
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.derived(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return shape_err("concat_cols", self.value(parts[0]).shape(), t.shape());
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Multiplies row `i` of matrix `m` by `s[i]`.
    pub fn row_scale(&mut self, m: Var, s: Var) -> Result<Var> {
        let (tm, ts) = (self.value(m), self.value(s));
        if tm.rank() != 2 || ts.numel() != tm.rows() {
            return shape_err("row_scale", tm.shape(), ts.shape());
        }
        let mut out = tm.clone();
        for r in 0..tm.rows() {
            let f = ts.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.derived(out, Op::RowScale(m, s), &[m, s]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// `∂loss/∂v` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.grads[loss.0] = Some(Tensor::ones(&shape));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor) -> Result<()> {
        // Borrow the op immutably while computing contributions, then apply.
        let mut contribs: Vec<(Var, Tensor)> = Vec::new();
        {
            let op = &self.nodes[id].op;
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if self.wants(*a) {
                        let mut da = vec![0.0; m * k];
                        tensor::gemm_nt_acc(g.data(), tb.data(), &mut da, m, n, k);
                        contribs.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; k * n];
                        tensor::gemm_tn_acc(ta.data(), g.data(), &mut db, m, k, n);
                        contribs.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    if self.wants(*a) {
                        let mut da = vec![0.0; m * k];
                        tensor::gemm_acc(g.data(), tb.data(), &mut da, m, n, k);
                        contribs.push((*a, Tensor::new(ta.shape().to_vec(), da)?));
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; n * k];
                        tensor::gemm_tn_acc(g.data(), ta.data(), &mut db, m, n, k);
                        contribs.push((*b, Tensor::new(tb.shape().to_vec(), db)?));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::AddRow(m, bias) => {
                    contribs.push((*m, g.clone()));
                    if self.wants(*bias) {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for r in 0..g.rows() {
                            db.iter_mut().zip(g.row(r)).for_each(|(d, x)| *d += x);
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        contribs.push((*bias, Tensor::new(shape, db)?));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.wants(*a) {
                        contribs.push((*a, zip_map(g, tb, |x, y| x * y)));
                    }
                    if self.wants(*b) {
                        contribs.push((*b, zip_map(g, ta, |x, y| x * y)));
                    }
                }
                Op::Affine(x, s) => {
                    let mut dx = g.clone();
                    dx.data_mut().iter_mut().for_each(|v| *v *= s);
                    contribs.push((*x, dx));
                }
                Op::Transpose(x) => contribs.push((*x, tensor::transpose(g)?)),
                Op::Softmax(x, axis) => {
                    let s = &self.nodes[id].value;
                    let (outer, len, inner) = axis_strides(s.shape(), *axis);
                    let mut dx = g.clone();
                    let (sd, gd, dd) = (s.data(), g.data(), dx.data_mut());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| gd[at(j)] * sd[at(j)]).sum();
                            for j in 0..len {
                                dd[at(j)] = sd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    shift,
                    xhat,
                    rstd,
                } => {
                    let d = g.cols();
                    let rows = g.rows();
                    let tg = self.value(*gamma);
                    if self.wants(*x) {
                        let mut dx = vec![0.0; rows * d];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut sum_dh = 0.0;
                            let mut sum_dh_xh = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * tg.data()[j];
                                sum_dh += dh;
                                sum_dh_xh += dh * xh[j];
                            }
                            let k = rstd[r] / d as f64;
                            for j in 0..d {
                                let dh = gr[j] * tg.data()[j];
                                dx[r * d + j] =
                                    k * (d as f64 * dh - sum_dh - xh[j] * sum_dh_xh);
                            }
                        }
                        let shape = self.value(*x).shape().to_vec();
                        contribs.push((*x, Tensor::new(shape, dx)?));
                    }
                    if self.wants(*gamma) || self.wants(*shift) {
                        let mut dgamma = vec![0.0; d];
                        let mut dshift = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                dgamma[j] += g.row(r)[j] * xhat[r * d + j];
                                dshift[j] += g.row(r)[j];
                            }
                        }
                        let gs = tg.shape().to_vec();
                        let ss = self.value(*shift).shape().to_vec();
                        contribs.push((*gamma, Tensor::new(gs, dgamma)?));
                        contribs.push((*shift, Tensor::new(ss, dshift)?));
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    contribs.push((*x, zip_map(g, tx, |gv, xv| gv * tensor::gelu_grad_scalar(xv))));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dl.row_mut(r)[label] -= 1.0;
                    }
                    dl.data_mut().iter_mut().for_each(|v| *v *= scale);
                    contribs.push((*logits, dl));
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    contribs.push((*x, Tensor::full(&shape, g.data()[0])));
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let v = g.data()[0] / t.numel() as f64;
                    contribs.push((*x, Tensor::full(t.shape(), v)));
                }
                Op::SelectRows(x, rows) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(g.row(k))
                            .for_each(|(d, v)| *d += v);
                    }
                    contribs.push((*x, dx));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.wants(p) {
                            let shape = self.value(p).shape().to_vec();
                            let part = g.data()[offset..offset + n].to_vec();
                            contribs.push((p, Tensor::new(shape, part)?));
                        }
                        offset += n;
                    }
                }
                Op::SliceCols(x, start) => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.shape());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    contribs.push((*x, dx));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.wants(p) {
                            let mut dp = Tensor::zeros(self.value(p).shape());
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            contribs.push((p, dp));
                        }
                        offset += w;
                    }
                }
                Op::RowScale(m, s) => {
                    let (tm, ts) = (self.value(*m), self.value(*s));
                    if self.wants(*m) {
                        let mut dm = g.clone();
                        for r in 0..g.rows() {
                            let f = ts.data()[r];
                            dm.row_mut(r).iter_mut().for_each(|v| *v *= f);
                        }
                        contribs.push((*m, dm));
                    }
                    if self.wants(*s) {
                        let mut ds = Tensor::zeros(ts.shape());
                        for r in 0..g.rows() {
                            ds.data_mut()[r] =
                                g.row(r).iter().zip(tm.row(r)).map(|(a, b)| a * b).sum();
                        }
                        contribs.push((*s, ds));
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    contribs.push((*x, g.clone().reshape(&shape)?));
                }
            }
        }
        debug_assert!(contribs
            .iter()
            .all(|(v, t)| t.shape() == self.value(*v).shape()));
        for (v, t) in contribs {
            self.accumulate(v, t);
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(o, &y)| *o = f(*o, y));
    out
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(p+h) − f(p−h)) / 2h`, element by element, with relative
/// error `|a − n| / max(|a|, |n|, 1e-12)`.
///
/// `f` receives the graph and one trainable [`Var`] per entry of `params`.
pub fn finite_diff_check<'a, F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.trainable(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
