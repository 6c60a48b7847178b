//! Reverse-mode differentiation over a small, fixed op vocabulary.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table. Nodes are
//! only ever appended, so the recording order is a valid topological order.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-10;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SoftmaxCe { logits: Var, targets: Tensor },
    GaussianKl {
        mean: Var,
        logvar: Var,
        prior_mean: Vec<f64>,
        prior_logvar: Vec<f64>,
    },
    SliceCols(Var, usize),
    Gather { table: Var, index: Vec<usize> },
    StraightThrough(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros if nothing flowed into it.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            Tensor::zeros(&self.shapes[v.0])
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b), ta, tb)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the single-row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(Error::dim(format!(
                "row bias of length {} for {} columns",
                b.len(),
                x.cols()
            )));
        }
        let mut value = x.clone();
        let cols = x.cols();
        for r in 0..x.rows() {
            for (v, bv) in value.row_mut(r).iter_mut().zip(b.values()) {
                *v += bv;
            }
        }
        debug_assert_eq!(value.cols(), cols);
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// `ln(max(x, LOG_FLOOR))`.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(value, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Fused `−Σ_ij targets_ij · log softmax(logits_i)_j`, a scalar.
    ///
    /// Targets may be any non-negative weights (counts, one-hots).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != targets.rows() || x.cols() != targets.cols() {
            return Err(Error::dim(format!(
                "cross-entropy logits {:?} vs targets {:?}",
                x.shape(),
                targets.shape()
            )));
        }
        let mut total = 0.0;
        for r in 0..x.rows() {
            let row = x.row(r);
            let lse = log_sum_exp(row);
            for (l, t) in row.iter().zip(targets.row(r)) {
                if *t != 0.0 {
                    total -= t * (l - lse);
                }
            }
        }
        Ok(self.push(Tensor::from_vec(vec![total]), Op::SoftmaxCe { logits, targets }))
    }

    /// Sum over rows of the diagonal-Gaussian `KL(N(mean, e^logvar) ‖ prior)`.
    pub fn gaussian_kl(
        &mut self,
        mean: Var,
        logvar: Var,
        prior_mean: &[f64],
        prior_logvar: &[f64],
    ) -> Result<Var> {
        self.check_same(mean, logvar, "gaussian_kl")?;
        let (m, lv) = (self.value(mean), self.value(logvar));
        if m.cols() != prior_mean.len() || m.cols() != prior_logvar.len() {
            return Err(Error::dim(format!(
                "gaussian_kl: {} posterior dims vs prior {}/{}",
                m.cols(),
                prior_mean.len(),
                prior_logvar.len()
            )));
        }
        let mut total = 0.0;
        for r in 0..m.rows() {
            total += kl_row(m.row(r), lv.row(r), prior_mean, prior_logvar);
        }
        Ok(self.push(
            Tensor::from_vec(vec![total]),
            Op::GaussianKl {
                mean,
                logvar,
                prior_mean: prior_mean.to_vec(),
                prior_logvar: prior_logvar.to_vec(),
            },
        ))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::dim(format!(
                "column slice {start}..{end} of {} columns",
                x.cols()
            )));
        }
        let w = end - start;
        let mut values = Vec::with_capacity(x.rows() * w);
        for r in 0..x.rows() {
            values.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Tensor::matrix(x.rows(), w, values)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Row lookup: output row `i` is `concat(table[index[i·group..(i+1)·group]])`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, group: usize) -> Result<Var> {
        let t = self.value(table);
        if group == 0 || index.len() % group != 0 {
            return Err(Error::dim(format!(
                "gather of {} indices in groups of {group}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim(format!("gather index {bad} out of {} rows", t.rows())));
        }
        let cols = t.cols();
        let mut values = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            values.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(index.len() / group, group * cols, values)?;
        Ok(self.push(value, Op::Gather { table, index }))
    }

    /// Forward value `quantized`, backward identity into `input`.
    pub fn straight_through(&mut self, input: Var, quantized: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.rows() != quantized.rows() || x.cols() != quantized.cols() {
            return Err(Error::dim(format!(
                "straight-through {:?} vs {:?}",
                x.shape(),
                quantized.shape()
            )));
        }
        Ok(self.push(quantized, Op::StraightThrough(input)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(vec![s]), Op::Sum(a))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G
                    let ga = if *ta {
                        bv.matmul_t(&g, *tb, true)?
                    } else {
                        g.matmul_t(bv, false, !*tb)?
                    };
                    let gb = if *tb {
                        g.matmul_t(av, true, *ta)?
                    } else {
                        av.matmul_t(&g, !*ta, false)?
                    };
                    accumulate(&mut grads[a.0], ga.reshape(av.shape().to_vec())?);
                    accumulate(&mut grads[b.0], gb.reshape(bv.shape().to_vec())?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], Tensor::new(bshape, gb)?);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| {
                        if y > LOG_FLOOR {
                            x / y
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |x, y| {
                        if y >= *lo && y <= *hi {
                            x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut ga = g.clone();
                    for r in 0..s.rows() {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                        for (out, (gi, si)) in ga.row_mut(r).iter_mut().zip(g.row(r).iter().zip(s.row(r))) {
                            *out = si * (gi - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxCe { logits, targets } => {
                    let up = g.values()[0];
                    let x = self.value(*logits);
                    let mut gl = x.clone();
                    for r in 0..x.rows() {
                        let total: f64 = targets.row(r).iter().sum();
                        let row = gl.row_mut(r);
                        softmax_in_place(row);
                        for (p, t) in row.iter_mut().zip(targets.row(r)) {
                            *p = up * (total * *p - t);
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::GaussianKl {
                    mean,
                    logvar,
                    prior_mean,
                    prior_logvar,
                } => {
                    let up = g.values()[0];
                    let (m, lv) = (self.value(*mean), self.value(*logvar));
                    let mut gm = m.clone();
                    let mut glv = lv.clone();
                    for r in 0..m.rows() {
                        for k in 0..m.cols() {
                            let pv = prior_logvar[k].exp();
                            gm.set(r, k, up * (m.get(r, k) - prior_mean[k]) / pv);
                            glv.set(r, k, up * 0.5 * ((lv.get(r, k) - prior_logvar[k]).exp() - 1.0));
                        }
                    }
                    accumulate(&mut grads[mean.0], gm);
                    accumulate(&mut grads[logvar.0], glv);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather { table, index } => {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut gt = Tensor::zeros(t.shape());
                    let flat = g.values();
                    for (n, &i) in index.iter().enumerate() {
                        let src = &flat[n * cols..(n + 1) * cols];
                        for (d, s) in gt.row_mut(i).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::StraightThrough(a) => accumulate(&mut grads[a.0], g),
                Op::Sum(a) => {
                    let up = g.values()[0];
                    accumulate(&mut grads[a.0], Tensor::filled(self.value(*a).shape(), up));
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn kl_row(m: &[f64], lv: &[f64], pm: &[f64], plv: &[f64]) -> f64 {
    let mut kl = 0.0;
    for k in 0..m.len() {
        let d = m[k] - pm[k];
        kl += (lv[k] - plv[k]).exp() + d * d / plv[k].exp() - 1.0 + plv[k] - lv[k];
    }
    0.5 * kl
}
