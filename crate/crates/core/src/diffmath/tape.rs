//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Every primitive pushes a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in exact reverse
//! order and applies each primitive's hand-written adjoint rule. Nodes that
//! do not depend on any gradient-requiring leaf are skipped entirely, so a
//! frozen leaf always receives an exactly-zero gradient.

use super::matrix::{log_sum_exp, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowSoftmax(Var),
    L2NormalizeRows(Var),
    /// Mean softmax cross-entropy over rows; caches the row softmax.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    /// Mean over masked rows of the summed squared error.
    SquaredError {
        pred: Var,
        target: Matrix,
        mask: Vec<bool>,
    },
    WeightedSum(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded forward/backward recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; an all-zero matrix when `v` did not
    /// receive any gradient (frozen or disconnected).
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. Only leaves with `requires_grad` seed gradient flow.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// `m + 1·rowᵀ`: adds a `1 x cols` row to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Result<Var> {
        let value = self.value(m).add_row_broadcast(self.value(row))?;
        let needs = self.needs(m) || self.needs(row);
        Ok(self.push(value, Op::AddRowBroadcast(m, row), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax()?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::RowSoftmax(a), needs))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).l2_normalize_rows()?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::L2NormalizeRows(a), needs))
    }

    /// Mean over rows of `logsumexp(row) - row[label]`; a `1 x 1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: l.shape(),
                right: (labels.len(), 1),
            });
        }
        l.ensure_finite("softmax_cross_entropy")?;
        let n = l.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n,
            });
        }
        let mut probs = l.clone();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            loss += log_sum_exp(l.row(r)) - l.get(r, y);
            softmax_in_place(probs.row_mut(r));
        }
        let rows = labels.len().max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss / rows),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean over rows with `mask[r]` of `Σ_c (pred - target)²`; a `1 x 1` node.
    pub fn squared_error(&mut self, pred: Var, target: &Matrix, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.rows() {
            return Err(Error::Shape {
                op: "squared_error",
                left: p.shape(),
                right: target.shape(),
            });
        }
        let active = mask.iter().filter(|m| **m).count();
        let mut loss = 0.0;
        for r in (0..p.rows()).filter(|r| mask[*r]) {
            loss += p
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let value = if active == 0 { 0.0 } else { loss / active as f64 };
        let needs = self.needs(pred) && active > 0;
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::SquaredError {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// `Σ a ∘ weights`; a `1 x 1` node used to reduce any output to a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Matrix) -> Result<Var> {
        let value = self.value(a).frobenius_dot(weights)?;
        let needs = self.needs(a);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::WeightedSum(a, weights.clone()),
            needs,
        ))
    }

    /// Runs the reverse sweep from a `1 x 1` node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.needs(loss) {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                }
                Op::AddRowBroadcast(m, row) => {
                    if self.needs(*row) {
                        accumulate(&mut grads, *row, g.column_sums())?;
                    }
                    if self.needs(*m) {
                        accumulate(&mut grads, *m, g.clone())?;
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k))?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for (gv, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let norm = super::matrix::l2_norm(x.row(r));
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for (gv, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gv = (*gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.get(0, 0) / labels.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = gl.get(r, y);
                        gl.set(r, y, v - 1.0);
                    }
                    accumulate(&mut grads, *logits, gl.scale(scale))?;
                }
                Op::SquaredError { pred, target, mask } => {
                    let active = mask.iter().filter(|m| **m).count().max(1) as f64;
                    let p = self.value(*pred);
                    let mut gp = Matrix::zeros(p.rows(), p.cols());
                    let scale = 2.0 * g.get(0, 0) / active;
                    for r in (0..p.rows()).filter(|r| mask[*r]) {
                        for c in 0..p.cols() {
                            gp.set(r, c, scale * (p.get(r, c) - target.get(r, c)));
                        }
                    }
                    accumulate(&mut grads, *pred, gp)?;
                }
                Op::WeightedSum(a, w) => accumulate(&mut grads, *a, w.scale(g.get(0, 0)))?,
            }
            // Keep leaf gradients; interior ones are no longer needed.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.backward_done = true;
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
