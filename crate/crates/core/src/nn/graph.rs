//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it is evaluated. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every recorded node. Every op checks its output for NaN/Inf.

use super::optim::{ParamId, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(Var, Vec<f64>),
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Pick { x: Var, index: usize },
    LogSumExp { x: Var, subset: Vec<usize> },
    LogSoftmaxPick { x: Var, index: usize },
    LogSigmoidSum { x: Var, subset: Vec<usize> },
    BceWithLogitsMean { x: Var, labels: Vec<f64> },
    CrossEntropy { x: Var, label: usize },
    CategoricalEntropy(Var),
    BernoulliEntropyMean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp<'a>(vals: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = vals.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let inv = 1.0 / out.iter().sum::<f64>();
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (gradients are still reported for it).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), (k, 1), tb.data(), (1, k), 0.0, &mut out);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.len() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &b) in chunk.iter_mut().zip(tr.data()) {
                *d += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())?;
        self.push("scale", t, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push("relu", t, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect())?;
        self.push("exp", t, Op::Exp(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            data.extend(softmax(&tx.data()[r * c..(r + 1) * c]));
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax", t, Op::SoftmaxRows(x))
    }

    /// Row-wise normalization followed by the affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::Shape {
                op: "mask",
                left: tx.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().zip(&mask).map(|(a, b)| a * b).collect(),
        )?;
        self.push("mask", t, Op::Mask(x, mask))
    }

    /// Mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push("mean_rows", Tensor::matrix(1, c, out)?, Op::MeanRows(x))
    }

    /// Column-wise max over rows, giving a `1 x c` row. The gradient goes to
    /// the first row attaining the max.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut out = tx.row(0).to_vec();
        let mut argmax = vec![0; c];
        for r in 1..rows {
            for (j, v) in tx.row(r).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = r;
                }
            }
        }
        self.push("max_rows", Tensor::matrix(1, c, out)?, Op::MaxRows { x, argmax })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(tx.rows(), len, out)?;
        self.push("slice_cols", t, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Flat element `index` as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        let v = *tx
            .data()
            .get(index)
            .ok_or_else(|| Error::arg(format!("pick index {index} out of {}", tx.len())))?;
        self.push("pick", Tensor::scalar(v), Op::Pick { x, index })
    }

    /// `log sum_{j in subset} exp(x_j)` over flat indices.
    pub fn logsumexp_subset(&mut self, x: Var, subset: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if subset.is_empty() || subset.iter().any(|&j| j >= tx.len()) {
            return Err(Error::arg("logsumexp subset empty or out of range"));
        }
        let vals: Vec<f64> = subset.iter().map(|&j| tx.data()[j]).collect();
        let v = logsumexp(vals.iter());
        self.push("logsumexp", Tensor::scalar(v), Op::LogSumExp { x, subset })
    }

    /// `log softmax(x)[index]` over all elements of `x`.
    pub fn log_softmax_pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.len() {
            return Err(Error::arg(format!("index {index} out of {}", tx.len())));
        }
        let v = tx.data()[index] - logsumexp(tx.data().iter());
        self.push("log_softmax_pick", Tensor::scalar(v), Op::LogSoftmaxPick { x, index })
    }

    /// `sum_{j in subset} log sigmoid(x_j)`.
    pub fn log_sigmoid_sum(&mut self, x: Var, subset: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if subset.iter().any(|&j| j >= tx.len()) {
            return Err(Error::arg("log_sigmoid_sum index out of range"));
        }
        let v: f64 = subset.iter().map(|&j| -softplus(-tx.data()[j])).sum();
        self.push("log_sigmoid_sum", Tensor::scalar(v), Op::LogSigmoidSum { x, subset })
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits_mean(&mut self, x: Var, labels: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if labels.len() != tx.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: tx.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let v = tx
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / labels.len() as f64;
        self.push("bce_with_logits", Tensor::scalar(v), Op::BceWithLogitsMean { x, labels })
    }

    pub fn cross_entropy(&mut self, x: Var, label: usize) -> Result<Var> {
        let tx = self.value(x);
        if label >= tx.len() {
            return Err(Error::arg(format!("label {label} out of {}", tx.len())));
        }
        let v = logsumexp(tx.data().iter()) - tx.data()[label];
        self.push("cross_entropy", Tensor::scalar(v), Op::CrossEntropy { x, label })
    }

    /// Entropy of `softmax(x)` over all elements.
    pub fn categorical_entropy(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let lse = logsumexp(tx.data().iter());
        let h: f64 = tx
            .data()
            .iter()
            .map(|&z| {
                let lp = z - lse;
                -lp.exp() * lp
            })
            .sum();
        self.push("categorical_entropy", Tensor::scalar(h), Op::CategoricalEntropy(x))
    }

    /// Mean over elements of the Bernoulli entropy of `sigmoid(x)`.
    pub fn bernoulli_entropy_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let h = tx.data().iter().map(|&z| bernoulli_entropy(z)).sum::<f64>() / tx.len() as f64;
        self.push("bernoulli_entropy", Tensor::scalar(h), Op::BernoulliEntropyMean(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        op: self.op_name(i),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn op_name(&self, i: usize) -> &'static str {
        match &self.nodes[i].op {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            _ => "backward",
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                gemm(m, n, k, 1.0, g, (n, 1), tb.data(), (1, n), 1.0, acc!(*a));
                gemm(k, m, n, 1.0, ta.data(), (1, k), g, (n, 1), 1.0, acc!(*b));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                gemm(m, n, k, 1.0, g, (n, 1), tb.data(), (k, 1), 1.0, acc!(*a));
                gemm(n, m, k, 1.0, g, (1, n), ta.data(), (k, 1), 1.0, acc!(*b));
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g, 1.0);
                add_into(acc!(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g, 1.0);
                add_into(acc!(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                for (d, (gi, bi)) in acc!(*a).iter_mut().zip(g.iter().zip(tb)) {
                    *d += gi * bi;
                }
                for (d, (gi, ai)) in acc!(*b).iter_mut().zip(g.iter().zip(ta)) {
                    *d += gi * ai;
                }
            }
            Op::AddRow(x, row) => {
                add_into(acc!(*x), g, 1.0);
                let c = self.value(*row).len();
                let dr = acc!(*row);
                for chunk in g.chunks(c) {
                    for (d, gi) in dr.iter_mut().zip(chunk) {
                        *d += gi;
                    }
                }
            }
            Op::Scale(x, s) => add_into(acc!(*x), g, *s),
            Op::Relu(x) => {
                for (d, (gi, yi)) in acc!(*x).iter_mut().zip(g.iter().zip(y)) {
                    if *yi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Exp(x) => {
                for (d, (gi, yi)) in acc!(*x).iter_mut().zip(g.iter().zip(y)) {
                    *d += gi * yi;
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                let dx = acc!(*x);
                for r in 0..node.value.rows() {
                    let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let dg = acc!(*gamma);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let db = acc!(*beta);
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                }
                let dx = acc!(*x);
                let mut dh = vec![0.0; c];
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        dh[j] = g[r * c + j] * gam[j];
                        s1 += dh[j];
                        s2 += dh[j] * xhat[r * c + j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        dx[r * c + j] +=
                            inv_std[r] / cf * (cf * dh[j] - s1 - xhat[r * c + j] * s2);
                    }
                }
            }
            Op::Mask(x, mask) => {
                for (d, (gi, mi)) in acc!(*x).iter_mut().zip(g.iter().zip(mask)) {
                    *d += gi * mi;
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (rows, c) = (tx.rows(), tx.cols());
                let dx = acc!(*x);
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] += g[j] / rows as f64;
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let c = argmax.len();
                let dx = acc!(*x);
                for (j, &r) in argmax.iter().enumerate() {
                    dx[r * c + j] += g[j];
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                let dx = acc!(*x);
                for r in 0..node.value.rows() {
                    for j in 0..len {
                        dx[r * c + start + j] += g[r * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = acc!(p);
                    for r in 0..node.value.rows() {
                        for j in 0..w {
                            dp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                for d in acc!(*x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Pick { x, index } => acc!(*x)[*index] += g[0],
            Op::LogSumExp { x, subset } => {
                let xd = self.value(*x).data();
                let lse = y[0];
                let dx = acc!(*x);
                for &j in subset {
                    dx[j] += g[0] * (xd[j] - lse).exp();
                }
            }
            Op::LogSoftmaxPick { x, index } => {
                let p = softmax(self.value(*x).data());
                let dx = acc!(*x);
                for (j, pj) in p.iter().enumerate() {
                    dx[j] -= g[0] * pj;
                }
                dx[*index] += g[0];
            }
            Op::LogSigmoidSum { x, subset } => {
                let xd = self.value(*x).data();
                let dx = acc!(*x);
                for &j in subset {
                    dx[j] += g[0] * sigmoid(-xd[j]);
                }
            }
            Op::BceWithLogitsMean { x, labels } => {
                let xd = self.value(*x).data();
                let n = labels.len() as f64;
                let dx = acc!(*x);
                for (j, l) in labels.iter().enumerate() {
                    dx[j] += g[0] * (sigmoid(xd[j]) - l) / n;
                }
            }
            Op::CrossEntropy { x, label } => {
                let p = softmax(self.value(*x).data());
                let dx = acc!(*x);
                for (j, pj) in p.iter().enumerate() {
                    dx[j] += g[0] * pj;
                }
                dx[*label] -= g[0];
            }
            Op::CategoricalEntropy(x) => {
                let xd = self.value(*x).data();
                let lse = logsumexp(xd.iter());
                let h = y[0];
                let dx = acc!(*x);
                for (j, &z) in xd.iter().enumerate() {
                    let lp = z - lse;
                    dx[j] -= g[0] * lp.exp() * (lp + h);
                }
            }
            Op::BernoulliEntropyMean(x) => {
                let xd = self.value(*x).data();
                let n = xd.len() as f64;
                let dx = acc!(*x);
                for (j, &z) in xd.iter().enumerate() {
                    let s = sigmoid(z);
                    dx[j] -= g[0] * z * s * (1.0 - s) / n;
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

pub fn bernoulli_entropy(z: f64) -> f64 {
    let s = sigmoid(z);
    s * softplus(-z) + (1.0 - s) * softplus(z)
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the loss.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }
}
