//! Wengert-list reverse-mode differentiation over [`Matrix`] values.
//!
//! Every primitive records one node holding its output value and the inputs
//! it read. [`Tape::backward`] walks the list in reverse and applies each
//! node's vector-Jacobian product. Nodes that do not depend on any trainable
//! leaf are skipped, so frozen weights cost nothing on the way back.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{LabError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity `f(·)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AffineMix {
        x: Var,
        y: Var,
        alpha: f64,
        beta: f64,
    },
    Scale(Var, f64),
    Hadamard(Var, Var),
    Activate(Var, Activation),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target`'s buffer (zeros when unreachable).
    pub fn accumulate_into(&self, var: Var, target: &mut Matrix) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> LabError {
    LabError::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, delta: impl IntoIterator<Item = f64>, len: usize) {
    let g = acc.get_or_insert_with(|| vec![0.0; len]);
    for (a, d) in g.iter_mut().zip(delta) {
        *a += d;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(LabError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a copy of `m`; tracked iff `m.requires_grad()`.
    pub fn leaf(&mut self, m: &Matrix) -> Var {
        let needs = m.requires_grad();
        let mut value = m.clone();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked value.
    pub fn constant(&mut self, mut m: Matrix) -> Var {
        m.set_requires_grad(false);
        self.nodes.push(Node {
            value: m,
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(out, needs, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.shape() != b.shape() {
            return Err(shape_err("add", a, b));
        }
        let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
        let out = Matrix::from_parts(a.rows(), a.cols(), data);
        let needs = self.needs(x) || self.needs(y);
        self.push(out, needs, Op::Add(x, y), "add")
    }

    /// Elementwise `alpha * x + beta * y`.
    pub fn affine_mix(&mut self, x: Var, y: Var, alpha: f64, beta: f64) -> Result<Var> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(LabError::NonFinite("affine_mix coefficients".into()));
        }
        let out = self.value(x).affine_mix(self.value(y), alpha, beta)?;
        let needs = self.needs(x) || self.needs(y);
        self.push(out, needs, Op::AffineMix { x, y, alpha, beta }, "affine_mix")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let a = self.value(x);
        let out = Matrix::from_parts(a.rows(), a.cols(), a.data().iter().map(|v| c * v).collect());
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale(x, c), "scale")
    }

    pub fn hadamard(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.shape() != b.shape() {
            return Err(shape_err("hadamard", a, b));
        }
        let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
        let out = Matrix::from_parts(a.rows(), a.cols(), data);
        let needs = self.needs(x) || self.needs(y);
        self.push(out, needs, Op::Hadamard(x, y), "hadamard")
    }

    pub fn nonlinearity(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let a = self.value(x);
        let data = a.data().iter().map(|v| kind.apply(*v)).collect();
        let out = Matrix::from_parts(a.rows(), a.cols(), data);
        let needs = self.needs(x);
        self.push(out, needs, Op::Activate(x, kind), "nonlinearity")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let (rows, cols) = a.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = a.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let out = Matrix::from_parts(rows, cols, data);
        let needs = self.needs(x);
        self.push(out, needs, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Row-wise layer normalization; `gain` and `bias` are `1 x cols`.
    pub fn layernorm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(LabError::config("layernorm eps must be > 0"));
        }
        let (a, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = a.shape();
        if g.shape() != (1, cols) {
            return Err(shape_err("layernorm_rows gain", a, g));
        }
        if b.shape() != (1, cols) {
            return Err(shape_err("layernorm_rows bias", a, b));
        }
        let n = cols as f64;
        let mut normed = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                normed.push(xh);
                data.push(xh * g.data()[c] + b.data()[c]);
            }
        }
        let out = Matrix::from_parts(rows, cols, data);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNormRows {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        self.push(out, needs, op, "layernorm_rows")
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let a = self.value(x);
        if start + width > a.cols() {
            return Err(LabError::Shape {
                op: "slice_cols",
                lhs: a.shape(),
                rhs: (start, width),
            });
        }
        let mut data = Vec::with_capacity(a.rows() * width);
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row(r)[start..start + width]);
        }
        let out = Matrix::from_parts(a.rows(), width, data);
        let needs = self.needs(x);
        self.push(out, needs, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LabError::Input("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Matrix::from_parts(rows, cols, data);
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(out, needs, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Column means, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        if a.rows() == 0 {
            return Err(LabError::Input("mean_rows of empty matrix".into()));
        }
        let mut data = vec![0.0; a.cols()];
        for r in 0..a.rows() {
            for (d, v) in data.iter_mut().zip(a.row(r)) {
                *d += v;
            }
        }
        let n = a.rows() as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let out = Matrix::from_parts(1, a.cols(), data);
        let needs = self.needs(x);
        self.push(out, needs, Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Matrix::from_parts(1, 1, vec![total]), needs, Op::Sum(x), "sum")
    }

    /// Mean over rows of the softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let a = self.value(logits);
        let (rows, cols) = a.shape();
        if labels.len() != rows {
            return Err(LabError::Input(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= cols) {
            return Err(LabError::Input(format!(
                "label {l} at position {i} out of range for {cols} classes"
            )));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let row = a.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[*label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Matrix::from_parts(1, 1, vec![loss]), needs, op, "cross_entropy")
    }

    /// Reverse pass seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_vjp(node, &g, &mut grads);
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(LabError::NonFinite(format!("gradient of node {idx} (index {pos})")));
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gm = Matrix::from_parts(rows, cols, g.to_vec());
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    let da = gm.matmul(&bt).expect("shapes fixed at record time");
                    add_into(&mut grads[a.0], da.into_data(), self.value(*a).len());
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    let db = at.matmul(&gm).expect("shapes fixed at record time");
                    add_into(&mut grads[b.0], db.into_data(), self.value(*b).len());
                }
            }
            Op::Transpose(x) => {
                let gt = Matrix::from_parts(rows, cols, g.to_vec()).transpose();
                add_into(&mut grads[x.0], gt.into_data(), g.len());
            }
            Op::Add(x, y) => {
                for v in [x, y] {
                    if self.needs(*v) {
                        add_into(&mut grads[v.0], g.iter().copied(), g.len());
                    }
                }
            }
            Op::AffineMix { x, y, alpha, beta } => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|v| alpha * v), g.len());
                }
                if self.needs(*y) {
                    add_into(&mut grads[y.0], g.iter().map(|v| beta * v), g.len());
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.0], g.iter().map(|v| c * v), g.len());
            }
            Op::Hadamard(x, y) => {
                if self.needs(*x) {
                    let other = self.value(*y).data();
                    add_into(&mut grads[x.0], g.iter().zip(other).map(|(a, b)| a * b), g.len());
                }
                if self.needs(*y) {
                    let other = self.value(*x).data();
                    add_into(&mut grads[y.0], g.iter().zip(other).map(|(a, b)| a * b), g.len());
                }
            }
            Op::Activate(x, kind) => {
                let input = self.value(*x).data();
                let d = g.iter().zip(input).map(|(gv, xv)| gv * kind.derivative(*xv));
                add_into(&mut grads[x.0], d, g.len());
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let mut d = Vec::with_capacity(g.len());
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                add_into(&mut grads[x.0], d, g.len());
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gain_v = self.value(*gain).data();
                if self.needs(*x) {
                    let n = cols as f64;
                    let mut d = Vec::with_capacity(g.len());
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &normed[r * cols..(r + 1) * cols];
                        let dxh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        d.extend(
                            dxh.iter()
                                .zip(xh)
                                .map(|(dv, xv)| inv / n * (n * dv - sum_dxh - xv * sum_dxh_xh)),
                        );
                    }
                    add_into(&mut grads[x.0], d, g.len());
                }
                if self.needs(*gain) {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                    add_into(&mut grads[gain.0], d, cols);
                }
                if self.needs(*bias) {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                    add_into(&mut grads[bias.0], d, cols);
                }
            }
            Op::SliceCols { x, start } => {
                let src_cols = self.value(*x).cols();
                let mut d = vec![0.0; rows * src_cols];
                for r in 0..rows {
                    d[r * src_cols + start..r * src_cols + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                add_into(&mut grads[x.0], d, rows * src_cols);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                        }
                        add_into(&mut grads[p.0], d, rows * w);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                let src_rows = self.value(*x).rows();
                let n = src_rows as f64;
                let d = (0..src_rows).flat_map(|_| g.iter().map(move |v| v / n));
                add_into(&mut grads[x.0], d, src_rows * cols);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                add_into(&mut grads[x.0], std::iter::repeat_n(g[0], len), len);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (lr, lc) = self.value(*logits).shape();
                let scale = g[0] / lr as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, l) in labels.iter().enumerate() {
                    d[r * lc + l] -= scale;
                }
                add_into(&mut grads[logits.0], d, lr * lc);
            }
        }
    }
}
