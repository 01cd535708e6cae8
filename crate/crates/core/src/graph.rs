//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node to the tape. [`Graph::backward`] replays
//! the backward rules in reverse record order. Nodes that do not require a
//! gradient never get a gradient buffer, and only leaves that require a
//! gradient appear in the returned [`Gradients`].
//!
//! Each node also knows which activations its backward rule reads. Nodes
//! can be tagged with a named scope, and [`Graph::retained_floats`] reports
//! how many activation scalars a scope forces the backward pass to keep
//! alive. Parameters (leaves) are never counted as activations.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: Option<usize>,
}

/// An activation a backward rule keeps alive.
enum Saved {
    Node(Var),
    Internal(usize),
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    scopes: Vec<String>,
    current_scope: Option<usize>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            scopes: Vec::new(),
            current_scope: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Tags subsequently recorded nodes with `name` (or clears the tag).
    pub fn set_scope(&mut self, name: Option<&str>) {
        self.current_scope = name.map(|n| match self.scopes.iter().position(|s| s == n) {
            Some(i) => i,
            None => {
                self.scopes.push(n.to_string());
                self.scopes.len() - 1
            }
        });
    }

    /// Inserts a leaf. The value is rounded to the graph precision.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.rounded(self.precision);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = value.rounded(self.precision);
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.record(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.record(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.record(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.record(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.record(value, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`n` vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if !x.is_matrix() || r.len() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let n = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % n];
        }
        self.record(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.record(value, Op::Transpose(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.record(value, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax with per-row max subtraction. With `causal`, entry
    /// (i, j) for j > i is excluded and gets probability zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        if !x.is_matrix() {
            return Err(Error::shape("softmax_rows", x.shape(), &[]));
        }
        let value = softmax_rows(x, causal);
        self.record(value, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if !x.is_matrix() {
            return Err(Error::shape("layer_norm", x.shape(), &[]));
        }
        let (m, d) = (x.rows(), x.cols());
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", x.shape(), self.value(gain).shape()));
        }
        if d == 1 && eps == 0.0 {
            return Err(Error::Numerical(
                "layer_norm over a single feature with eps = 0 is degenerate".into(),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = Tensor::zeros(&[m, d]);
        let mut out = Tensor::zeros(&[m, d]);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normalized.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.record(
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[a, gain, bias],
        )
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::shape("embedding", t.shape(), &[]));
        }
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!(
                    "embedding index {id} out of range for table of {v} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        self.record(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean token cross-entropy with an integrated log-softmax. Rows whose
    /// target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        if !x.is_matrix() || x.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let probs = softmax_rows(x, false);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= x.cols() {
                    return Err(Error::Contract(format!(
                        "target {t} out of range for {} classes",
                        x.cols()
                    )));
                }
                let row = x.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no scored targets".into()));
        }
        let value = Tensor::scalar(total / count as f64);
        self.record(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.record(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        let value = Tensor::matrix(m, n, data)?;
        self.record(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        self.record(value, Op::SliceCols { input: a, start }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        self.record(value, Op::SliceRows { input: a, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.record(value, Op::Sum(a), &[a])
    }

    fn saved(&self, node: &Node) -> Vec<Saved> {
        let act = |v: Var| (!self.is_leaf(v)).then_some(Saved::Node(v));
        match &node.op {
            Op::MatMul(a, b) | Op::Mul(a, b) => {
                let mut s = Vec::new();
                if self.requires_grad(*b) {
                    s.extend(act(*a));
                }
                if self.requires_grad(*a) {
                    s.extend(act(*b));
                }
                s
            }
            Op::Gelu(a) => act(*a).into_iter().collect(),
            Op::Softmax(_) => vec![Saved::Internal(node.value.len())],
            Op::LayerNorm {
                normalized, inv_std, ..
            } => vec![Saved::Internal(normalized.len() + inv_std.len())],
            Op::CrossEntropy { probs, .. } => vec![Saved::Internal(probs.len())],
            _ => Vec::new(),
        }
    }

    /// Activation scalars retained for backward by the nodes recorded under
    /// `scope`. Each retained tensor is counted once per scope.
    pub fn retained_floats(&self, scope: &str) -> usize {
        let Some(idx) = self.scopes.iter().position(|s| s == scope) else {
            return 0;
        };
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for node in self.nodes.iter().filter(|n| n.scope == Some(idx)) {
            for s in self.saved(node) {
                match s {
                    Saved::Node(v) => {
                        if seen.insert(v) {
                            total += self.value(v).len();
                        }
                    }
                    Saved::Internal(n) => total += n,
                }
            }
        }
        total
    }

    /// Retained activation floats for every scope that has been used.
    pub fn retained_by_scope(&self) -> BTreeMap<String, usize> {
        self.scopes
            .iter()
            .map(|s| (s.clone(), self.retained_floats(s)))
            .collect()
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            match (&node.op, g.as_mut()) {
                (Op::Leaf, Some(t)) if node.requires_grad => {
                    self.precision.round_slice(t.data_mut());
                }
                _ => *g = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.requires_grad(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = dy.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).t_matmul(dy)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = dy.zip_with(self.value(*b), "mul", |g, y| g * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = dy.zip_with(self.value(*a), "mul", |g, x| g * x)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.scale(*s))?,
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone())?;
                if self.requires_grad(*row) {
                    let n = dy.cols();
                    let mut g = vec![0.0; n];
                    for (i, v) in dy.data().iter().enumerate() {
                        g[i % n] += v;
                    }
                    let g = Tensor::new(self.value(*row).shape().to_vec(), g)?;
                    self.accumulate(grads, *row, g)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transpose()?)?,
            Op::Gelu(a) => {
                let g = dy.zip_with(self.value(*a), "gelu", |g, x| g * gelu_grad(x))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut g = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let inner: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..n {
                        g.set(i, j, yr[j] * (dr[j] - inner));
                    }
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, d) = (normalized.rows(), normalized.cols());
                let gv = self.value(*gain).data();
                if self.requires_grad(*input) {
                    let mut gx = Tensor::zeros(&[m, d]);
                    for i in 0..m {
                        let (h, dr) = (normalized.row(i), dy.row(i));
                        let dh: Vec<f64> = (0..d).map(|j| dr[j] * gv[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dhh: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            let v = inv_std[i] / d as f64
                                * (d as f64 * dh[j] - sum_dh - h[j] * sum_dhh);
                            gx.set(i, j, v);
                        }
                    }
                    self.accumulate(grads, *input, gx)?;
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += dy.get(i, j) * normalized.get(i, j);
                        }
                    }
                    let gg = Tensor::new(self.value(*gain).shape().to_vec(), gg)?;
                    self.accumulate(grads, *gain, gg)?;
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gb[j] += dy.get(i, j);
                        }
                    }
                    let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb)?;
                    self.accumulate(grads, *bias, gb)?;
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let mut g = Tensor::zeros(self.value(*table).shape());
                    let d = g.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let row = &mut g.data_mut()[id * d..(id + 1) * d];
                        for (o, v) in row.iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *table, g)?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = dy.data()[0] / *count as f64;
                let mut g = Tensor::zeros(probs.shape());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..probs.cols() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g.set(i, j, (probs.get(i, j) - onehot) * scale);
                        }
                    }
                }
                self.accumulate(grads, *logits, g)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, dy.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    self.accumulate(grads, p, dy.slice_rows(start, h)?)?;
                    start += h;
                }
            }
            Op::SliceCols { input, start } => {
                if self.requires_grad(*input) {
                    let src = self.value(*input);
                    let mut g = Tensor::zeros(src.shape());
                    let w = dy.cols();
                    for i in 0..dy.rows() {
                        for j in 0..w {
                            g.set(i, start + j, dy.get(i, j));
                        }
                    }
                    self.accumulate(grads, *input, g)?;
                }
            }
            Op::SliceRows { input, start } => {
                if self.requires_grad(*input) {
                    let src = self.value(*input);
                    let mut g = Tensor::zeros(src.shape());
                    let n = src.cols();
                    g.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                    self.accumulate(grads, *input, g)?;
                }
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.value(*a).shape(), dy.data()[0]);
                self.accumulate(grads, *a, g)?;
            }
        }
        Ok(())
    }
}

fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let n = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let row = x.row(i);
        let live = if causal { (i + 1).min(n) } else { n };
        let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..live {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..live {
            out.set(i, j, out.get(i, j) / denom);
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::Transpose(..) => "transpose",
        Op::Gelu(..) => "gelu",
        Op::Softmax(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::Sum(..) => "sum",
    }
}

/// Gradients of the leaves that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Leaves that received a gradient buffer.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
    }
}
