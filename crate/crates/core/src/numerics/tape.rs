//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever activations its backward rule needs. `backward` then walks the
//! tape once in reverse, so node ids double as a topological order.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
    },
    Dot(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSumExpRows(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Recorded computation for one forward pass. Single-threaded; build one per
/// example and drop it after `backward`.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-12;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GradTape {
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

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out, &[a]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// `a[i, :] + bias` for every row; the only broadcasting op.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.numel() != ta.cols() || tb.rows() != 1 {
            return Err(Error::shape("add_row_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        let cols = ta.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        Ok(self.push(Op::AddRowBias(a, bias), out, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let rows = out.rows();
        for i in 0..rows {
            softmax_in_place(out.row_mut(i));
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then
    /// `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if d < 2 || tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(tx.shape());
        for i in 0..rows {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out.data_mut()[i * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            &[x, gain, bias],
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu(a), out, &[a])
    }

    /// Selects rows of a 2-D table; the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(Error::Invalid(format!(
                "gather_rows needs a matrix and at least one id, got {:?}",
                t.shape()
            )));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TokenOutOfRange { id, vocab: n });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    /// Mean of the rows whose mask entry is set, as a `1 x n` row.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.rows() {
            return Err(Error::shape("masked_mean_rows", t.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoPositions);
        }
        let d = t.cols();
        let mut out = vec![0.0; d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let out = Tensor::new(vec![1, d], out)?;
        Ok(self.push(
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            out,
            &[x],
        ))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Mean over masked-in rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m || mask.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                t.shape(),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::NoPositions);
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            if targets[i] >= n {
                return Err(Error::Invalid(format!(
                    "target {} out of range for {n} classes",
                    targets[i]
                )));
            }
            let row = t.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i]];
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / count as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Scales every row to unit Euclidean length. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let rows = out.rows();
        let mut norms = vec![0.0; rows];
        for (i, norm) in norms.iter_mut().enumerate() {
            let row = out.row_mut(i);
            *norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if *norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= *norm);
            }
        }
        self.push(Op::L2NormalizeRows { x, norms }, out, &[x])
    }

    /// `log(sum_j exp(x[i, j]))` per row, as an `m x 1` column.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.rows();
        let data = (0..m).map(|i| log_sum_exp(t.row(i))).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        Ok(self.push(Op::LogSumExpRows(x), out, &[x]))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `leaves`.
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<GradientMap> {
        for &leaf in leaves {
            match self.nodes.get(leaf.0) {
                Some(Node { op: Op::Leaf, .. }) => {}
                _ => return Err(Error::UnknownLeaf(leaf.0)),
            }
        }
        let loss_node = self.nodes.get(loss.0).ok_or(Error::UnknownLeaf(loss.0))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::NotScalar(loss_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = GradientMap::default();
        for &leaf in leaves {
            let g = grads[..]
                .get(leaf.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf.0].value.shape()));
            out.grads.insert(leaf, g);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bt = self.value(*b).transpose()?;
                    Self::accumulate(grads, *a, g.matmul(&bt)?)?;
                }
                if self.wants(*b) {
                    let at = self.value(*a).transpose()?;
                    Self::accumulate(grads, *b, at.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, g.transpose()?)?;
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.scaled(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?)?;
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?)?;
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*bias) {
                    let tb = self.value(*bias);
                    let cols = g.cols();
                    let mut d = vec![0.0; cols];
                    for i in 0..g.rows() {
                        for (s, v) in d.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    Self::accumulate(grads, *bias, Tensor::new(tb.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, c) => {
                Self::accumulate(grads, *a, g.scaled(*c))?;
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        *v = yr[j] * (gr[j] - inner);
                    }
                }
                Self::accumulate(grads, *a, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = y.cols();
                let rows = y.rows();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..rows {
                        for j in 0..d {
                            let gij = g.data()[i * d + j];
                            dg[j] += gij * xhat[i * d + j];
                            db[j] += gij;
                        }
                    }
                    if self.wants(*gain) {
                        Self::accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), dg)?)?;
                    }
                    if self.wants(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        Self::accumulate(grads, *bias, Tensor::new(shape, db)?)?;
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(y.shape());
                    let n = d as f64;
                    for i in 0..rows {
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g.data()[i * d + j] * tg.data()[j]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let sum_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                            *v = inv_std[i] / n * (n * dxhat[j] - sum - xh[j] * sum_xh);
                        }
                    }
                    Self::accumulate(grads, *x, dx)?;
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &xv)| gv * gelu_derivative(xv))
                    .collect();
                Self::accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?)?;
            }
            Op::GatherRows { table, ids } => {
                let mut d = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *table, d)?;
            }
            Op::MaskedMeanRows { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / count;
                    }
                }
                Self::accumulate(grads, *x, d)?;
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if self.wants(*a) {
                    Self::accumulate(grads, *a, self.value(*b).scaled(s))?;
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, self.value(*a).scaled(s))?;
                }
            }
            Op::Sum(a) => {
                Self::accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item()))?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let t = self.value(*logits);
                let n = t.cols();
                let count = mask.iter().filter(|&&b| b).count() as f64;
                let s = g.item() / count;
                let mut d = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..n {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        d.data_mut()[i * n + j] = s * (probs[i * n + j] - onehot);
                    }
                }
                Self::accumulate(grads, *logits, d)?;
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut d = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        *v = (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
                Self::accumulate(grads, *x, d)?;
            }
            Op::LogSumExpRows(a) => {
                let ta = self.value(*a);
                let mut d = ta.clone();
                for i in 0..ta.rows() {
                    let gi = g.data()[i];
                    let row = d.row_mut(i);
                    softmax_in_place(row);
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                Self::accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}
