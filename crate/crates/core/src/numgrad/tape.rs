//! Append-only operation record for reverse-mode differentiation.
//!
//! Every backward rule is expressed with the same recorded primitives as the
//! forward pass, so a gradient produced by [`Tape::grad`] is itself a node on
//! the tape and can be differentiated again. That is what lets the query loss
//! of a meta-learner be differentiated through an inner gradient step.

use std::cell::RefCell;

use super::tensor::Tensor;
use super::GradError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    AddBias(Var, Var),
    SumRows(Var),
    BroadcastRows { x: Var },
    SumCols(Var),
    BroadcastCols { x: Var },
    SumAll(Var),
    Expand { x: Var },
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Log(Var),
    Recip(Var),
    // targets are treated as constants
    SoftmaxCrossEntropy { logits: Var, targets: Var },
    Mse { pred: Var, target: Var },
    SumSquares(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddBias(..) => "add_bias",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::SumAll(_) => "sum",
            Op::Expand { .. } => "expand",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse { .. } => "mse",
            Op::SumSquares(_) => "sum_squares",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
        }
    }

    /// Inputs that gradients propagate into.
    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::AddBias(a, b) | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::Mse { pred, target } => [Some(pred), Some(target)],
            Op::SoftmaxCrossEntropy { logits, .. } => [Some(logits), None],
            Op::Transpose(x)
            | Op::Affine { x, .. }
            | Op::SumRows(x)
            | Op::BroadcastRows { x, .. }
            | Op::SumCols(x)
            | Op::BroadcastCols { x, .. }
            | Op::SumAll(x)
            | Op::Expand { x, .. }
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Recip(x)
            | Op::SumSquares(x)
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. } => [Some(x), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Single-writer record of primitive operations in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node recorded at or after position `len`.
    ///
    /// Vars pointing past `len` become invalid; using one afterwards panics.
    pub fn rewind(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, op: Op, value: Tensor) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Ok(Var(nodes.len() - 1))
    }

    fn unary(
        &self,
        x: Var,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor, GradError>,
    ) -> Result<Var, GradError> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.0].value)?
        };
        self.push(op, value)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, GradError>,
    ) -> Result<Var, GradError> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        self.push(op, value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::MatMul(a, b), kernels::matmul)
    }

    pub fn transpose(&self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Transpose(a), kernels::transpose)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Add(a, b), |x, y| kernels::zip(x, y, "add", |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| kernels::zip(x, y, "sub", |p, q| p - q))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| kernels::zip(x, y, "mul", |p, q| p * q))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var, GradError> {
        self.affine(x, c, 0.0)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var, GradError> {
        self.unary(x, Op::Affine { x, scale }, |t| {
            Ok(t.map(|v| scale * v + shift))
        })
    }

    /// Adds a rank-1 bias `[n]` to every row of a `[m, n]` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var, GradError> {
        self.binary(x, bias, Op::AddBias(x, bias), kernels::add_bias)
    }

    /// Column sums of a `[m, n]` matrix as a rank-1 `[n]` tensor.
    pub fn sum_rows(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::SumRows(x), kernels::sum_rows)
    }

    /// Repeats a rank-1 `[n]` tensor into `[rows, n]`.
    pub fn broadcast_rows(&self, x: Var, rows: usize) -> Result<Var, GradError> {
        self.unary(x, Op::BroadcastRows { x }, |t| kernels::broadcast_rows(t, rows))
    }

    /// Row sums of a `[m, n]` matrix as `[m, 1]`.
    pub fn sum_cols(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::SumCols(x), kernels::sum_cols)
    }

    /// Repeats a `[m, 1]` column into `[m, cols]`.
    pub fn broadcast_cols(&self, x: Var, cols: usize) -> Result<Var, GradError> {
        self.unary(x, Op::BroadcastCols { x }, |t| kernels::broadcast_cols(t, cols))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::SumAll(x), |t| Ok(Tensor::scalar(t.data().iter().sum())))
    }

    /// Fills the shape of `like` with the value of rank-0 `x`.
    pub fn expand_like(&self, x: Var, like: Var) -> Result<Var, GradError> {
        self.binary(x, like, Op::Expand { x }, |s, l| {
            if s.rank() != 0 {
                return Err(GradError::NotScalar {
                    shape: s.shape().to_vec(),
                });
            }
            Ok(Tensor::filled(l.shape(), s.item()))
        })
    }

    pub fn tanh(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::Tanh(x), |t| Ok(t.map(f64::tanh)))
    }

    pub fn relu(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::Relu(x), |t| Ok(t.map(|v| v.max(0.0))))
    }

    /// Row-wise softmax of a `[m, c]` matrix.
    pub fn softmax(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::Softmax(x), kernels::softmax)
    }

    pub fn log(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::Log(x), |t| Ok(t.map(f64::ln)))
    }

    pub fn recip(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::Recip(x), |t| Ok(t.map(|v| 1.0 / v)))
    }

    /// Mean over rows of `-sum_c targets * log softmax(logits)`.
    ///
    /// `targets` must be a `[m, c]` matrix of class probabilities (usually
    /// one-hot) and receives no gradient.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: Var) -> Result<Var, GradError> {
        self.binary(
            logits,
            targets,
            Op::SoftmaxCrossEntropy { logits, targets },
            kernels::softmax_cross_entropy,
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var, GradError> {
        self.binary(pred, target, Op::Mse { pred, target }, |p, t| {
            let d = kernels::zip(p, t, "mse", |a, b| a - b)?;
            Ok(Tensor::scalar(d.dot(&d) / d.numel() as f64))
        })
    }

    /// Squared l2 norm, `sum x^2`.
    pub fn sum_squares(&self, x: Var) -> Result<Var, GradError> {
        self.unary(x, Op::SumSquares(x), |t| Ok(Tensor::scalar(t.dot(t))))
    }

    /// `[m, a]` and `[m, b]` side by side as `[m, a + b]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::ConcatCols(a, b), kernels::concat_cols)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        self.unary(x, Op::SliceCols { x, start }, |t| kernels::slice_cols(t, start, len))
    }

    /// Places `[m, k]` at column `start` of a zero `[m, total]` matrix.
    pub fn pad_cols(&self, x: Var, start: usize, total: usize) -> Result<Var, GradError> {
        self.unary(x, Op::PadCols { x, start }, |t| kernels::pad_cols(t, start, total))
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this tape, so the returned vars can be
    /// used in further computation and differentiated again. `None` marks a
    /// var that `loss` does not depend on.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>, GradError> {
        let (seed, needs) = {
            let nodes = self.nodes.borrow();
            let loss_value = &nodes[loss.0].value;
            if loss_value.numel() != 1 {
                return Err(GradError::NotScalar {
                    shape: loss_value.shape().to_vec(),
                });
            }
            (Tensor::ones(loss_value.shape()), needs_grad(&nodes, loss, wrt))
        };

        let mut adjoint: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if needs[loss.0] {
            adjoint[loss.0] = Some(self.leaf(seed));
        }
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes.borrow()[i].op;
            for (input, contribution) in self.backprop(op, Var(i), g, &needs)?.into_iter().flatten() {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => contribution,
                    Some(acc) => self.add(acc, contribution)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 <= loss.0 { adjoint[w.0] } else { None })
            .collect())
    }

    /// Gradient values only. Nothing is recorded: the backward pass runs
    /// directly on tensors, so the result cannot be differentiated again.
    pub fn grad_values(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Tensor>>, GradError> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(GradError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let needs = needs_grad(&nodes, loss, wrt);
        let mut keep = vec![false; loss.0 + 1];
        for w in wrt.iter().filter(|w| w.0 <= loss.0) {
            keep[w.0] = true;
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if needs[loss.0] {
            adjoint[loss.0] = Some(Tensor::ones(loss_value.shape()));
        }
        for i in (0..=loss.0).rev() {
            if !needs[i] || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = if keep[i] { adjoint[i].clone() } else { adjoint[i].take() };
            let Some(g) = g else { continue };
            for (input, contribution) in backprop_values(&nodes, i, &g, &needs)?.into_iter().flatten() {
                match &mut adjoint[input.0] {
                    None => adjoint[input.0] = Some(contribution),
                    Some(acc) => acc.add_assign(&contribution)?,
                }
            }
        }
        let out: Vec<Option<Tensor>> = wrt
            .iter()
            .map(|w| if w.0 <= loss.0 { adjoint[w.0].clone() } else { None })
            .collect();
        if out.iter().flatten().any(|g| !g.is_finite()) {
            return Err(GradError::NonFinite { op: "backward" });
        }
        Ok(out)
    }

    fn backprop(
        &self,
        op: Op,
        out: Var,
        g: Var,
        needs: &[bool],
    ) -> Result<[Option<(Var, Var)>; 2], GradError> {
        let need = |v: Var| needs[v.0];
        let mut res = [None, None];
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b)?;
                    res[0] = Some((a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(a)?;
                    res[1] = Some((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res[0] = Some((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                res[0] = need(a).then_some((a, g));
                res[1] = need(b).then_some((b, g));
            }
            Op::Sub(a, b) => {
                res[0] = need(a).then_some((a, g));
                if need(b) {
                    res[1] = Some((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res[0] = Some((a, self.mul(g, b)?));
                }
                if need(b) {
                    res[1] = Some((b, self.mul(g, a)?));
                }
            }
            Op::Affine { x, scale, .. } => res[0] = Some((x, self.scale(g, scale)?)),
            Op::AddBias(x, bias) => {
                res[0] = need(x).then_some((x, g));
                if need(bias) {
                    res[1] = Some((bias, self.sum_rows(g)?));
                }
            }
            Op::SumRows(x) => {
                let rows = self.nodes.borrow()[x.0].value.rows();
                res[0] = Some((x, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows { x, .. } => res[0] = Some((x, self.sum_rows(g)?)),
            Op::SumCols(x) => {
                let cols = self.nodes.borrow()[x.0].value.cols();
                res[0] = Some((x, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols { x, .. } => res[0] = Some((x, self.sum_cols(g)?)),
            Op::SumAll(x) => res[0] = Some((x, self.expand_like(g, x)?)),
            Op::Expand { x, .. } => res[0] = Some((x, self.sum(g)?)),
            Op::Tanh(x) => {
                let y2 = self.mul(out, out)?;
                let dy = self.affine(y2, -1.0, 1.0)?;
                res[0] = Some((x, self.mul(g, dy)?));
            }
            Op::Relu(x) => {
                // derivative of the mask is zero almost everywhere
                let mask = self.nodes.borrow()[x.0]
                    .value
                    .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                res[0] = Some((x, self.mul(g, mask)?));
            }
            Op::Softmax(x) => {
                let cols = self.nodes.borrow()[x.0].value.cols();
                let gy = self.mul(g, out)?;
                let s = self.sum_cols(gy)?;
                let s = self.broadcast_cols(s, cols)?;
                let d = self.sub(g, s)?;
                res[0] = Some((x, self.mul(out, d)?));
            }
            Op::Log(x) => {
                let r = self.recip(x)?;
                res[0] = Some((x, self.mul(g, r)?));
            }
            Op::Recip(x) => {
                let y2 = self.mul(out, out)?;
                let gy = self.mul(g, y2)?;
                res[0] = Some((x, self.scale(gy, -1.0)?));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let rows = self.nodes.borrow()[logits.0].value.rows();
                let p = self.softmax(logits)?;
                let d = self.sub(p, targets)?;
                let e = self.expand_like(g, d)?;
                let gd = self.mul(e, d)?;
                res[0] = Some((logits, self.scale(gd, 1.0 / rows as f64)?));
            }
            Op::Mse { pred, target } => {
                let n = self.nodes.borrow()[pred.0].value.numel();
                let d = self.sub(pred, target)?;
                let e = self.expand_like(g, d)?;
                let gd = self.mul(e, d)?;
                let gp = self.scale(gd, 2.0 / n as f64)?;
                res[0] = need(pred).then_some((pred, gp));
                if need(target) {
                    res[1] = Some((target, self.scale(gp, -1.0)?));
                }
            }
            Op::SumSquares(x) => {
                let e = self.expand_like(g, x)?;
                let gx = self.mul(e, x)?;
                res[0] = Some((x, self.scale(gx, 2.0)?));
            }
            Op::ConcatCols(a, b) => {
                let left = self.nodes.borrow()[a.0].value.cols();
                let right = self.nodes.borrow()[b.0].value.cols();
                if need(a) {
                    res[0] = Some((a, self.slice_cols(g, 0, left)?));
                }
                if need(b) {
                    res[1] = Some((b, self.slice_cols(g, left, right)?));
                }
            }
            Op::SliceCols { x, start, .. } => {
                let total = self.nodes.borrow()[x.0].value.cols();
                res[0] = Some((x, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { x, start, .. } => {
                let len = self.nodes.borrow()[x.0].value.cols();
                res[0] = Some((x, self.slice_cols(g, start, len)?));
            }
        }
        Ok(res)
    }
}

/// Marks the nodes up to `loss` that depend on any of `wrt`.
fn needs_grad(nodes: &[Node], loss: Var, wrt: &[Var]) -> Vec<bool> {
    let mut needs = vec![false; loss.0 + 1];
    for w in wrt {
        if w.0 <= loss.0 {
            needs[w.0] = true;
        }
    }
    for i in 0..=loss.0 {
        if !needs[i] {
            needs[i] = nodes[i]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|input| needs[input.0]);
        }
    }
    needs
}

/// Value-level counterpart of `Tape::backprop`.
fn backprop_values(
    nodes: &[Node],
    out: usize,
    g: &Tensor,
    needs: &[bool],
) -> Result<[Option<(Var, Tensor)>; 2], GradError> {
    use kernels::zip;
    let need = |v: Var| needs[v.0];
    let val = |v: Var| &nodes[v.0].value;
    let y = &nodes[out].value;
    let mut res = [None, None];
    match nodes[out].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if need(a) {
                res[0] = Some((a, kernels::matmul(g, &kernels::transpose(val(b))?)?));
            }
            if need(b) {
                res[1] = Some((b, kernels::matmul(&kernels::transpose(val(a))?, g)?));
            }
        }
        Op::Transpose(a) => res[0] = Some((a, kernels::transpose(g)?)),
        Op::Add(a, b) => {
            res[0] = need(a).then(|| (a, g.clone()));
            res[1] = need(b).then(|| (b, g.clone()));
        }
        Op::Sub(a, b) => {
            res[0] = need(a).then(|| (a, g.clone()));
            res[1] = need(b).then(|| (b, g.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            if need(a) {
                res[0] = Some((a, zip(g, val(b), "mul", |p, q| p * q)?));
            }
            if need(b) {
                res[1] = Some((b, zip(g, val(a), "mul", |p, q| p * q)?));
            }
        }
        Op::Affine { x, scale } => res[0] = Some((x, g.map(|v| scale * v))),
        Op::AddBias(x, bias) => {
            res[0] = need(x).then(|| (x, g.clone()));
            if need(bias) {
                res[1] = Some((bias, kernels::sum_rows(g)?));
            }
        }
        Op::SumRows(x) => res[0] = Some((x, kernels::broadcast_rows(g, val(x).rows())?)),
        Op::BroadcastRows { x } => res[0] = Some((x, kernels::sum_rows(g)?)),
        Op::SumCols(x) => res[0] = Some((x, kernels::broadcast_cols(g, val(x).cols())?)),
        Op::BroadcastCols { x } => res[0] = Some((x, kernels::sum_cols(g)?)),
        Op::SumAll(x) => res[0] = Some((x, Tensor::filled(val(x).shape(), g.item()))),
        Op::Expand { x } => res[0] = Some((x, Tensor::scalar(g.data().iter().sum()))),
        Op::Tanh(x) => res[0] = Some((x, zip(g, y, "tanh", |p, t| p * (1.0 - t * t))?)),
        Op::Relu(x) => {
            res[0] = Some((x, zip(g, val(x), "relu", |p, v| if v > 0.0 { p } else { 0.0 })?));
        }
        Op::Softmax(x) => {
            let gy = zip(g, y, "softmax", |p, q| p * q)?;
            let s = kernels::broadcast_cols(&kernels::sum_cols(&gy)?, y.cols())?;
            let d = zip(g, &s, "softmax", |p, q| p - q)?;
            res[0] = Some((x, zip(y, &d, "softmax", |p, q| p * q)?));
        }
        Op::Log(x) => res[0] = Some((x, zip(g, val(x), "log", |p, v| p / v)?)),
        Op::Recip(x) => res[0] = Some((x, zip(g, y, "recip", |p, t| -p * t * t)?)),
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let z = val(logits);
            let c = g.item() / z.rows() as f64;
            let p = kernels::softmax(z)?;
            res[0] = Some((logits, zip(&p, val(targets), "softmax_cross_entropy", |a, t| c * (a - t))?));
        }
        Op::Mse { pred, target } => {
            let c = 2.0 * g.item() / val(pred).numel() as f64;
            let gp = zip(val(pred), val(target), "mse", |a, t| c * (a - t))?;
            if need(target) {
                res[1] = Some((target, gp.map(|v| -v)));
            }
            res[0] = need(pred).then_some((pred, gp));
        }
        Op::SumSquares(x) => {
            let c = 2.0 * g.item();
            res[0] = Some((x, val(x).map(|v| c * v)));
        }
        Op::ConcatCols(a, b) => {
            let left = val(a).cols();
            if need(a) {
                res[0] = Some((a, kernels::slice_cols(g, 0, left)?));
            }
            if need(b) {
                res[1] = Some((b, kernels::slice_cols(g, left, val(b).cols())?));
            }
        }
        Op::SliceCols { x, start } => res[0] = Some((x, kernels::pad_cols(g, start, val(x).cols())?)),
        Op::PadCols { x, start } => res[0] = Some((x, kernels::slice_cols(g, start, val(x).cols())?)),
    }
    Ok(res)
}

mod kernels {
    use super::super::tensor::Tensor;
    use super::super::GradError;

    fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
        GradError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
    }

    fn require_rank2(op: &'static str, t: &Tensor) -> Result<(), GradError> {
        if t.rank() == 2 {
            Ok(())
        } else {
            Err(GradError::Shape {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            })
        }
    }

    pub fn zip(
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, GradError> {
        if a.shape() != b.shape() {
            return Err(mismatch(op, a, b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("matmul", a)?;
        require_rank2("matmul", b)?;
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(mismatch("matmul", a, b));
        }
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(a: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("transpose", a)?;
        let (m, n) = a.dims2();
        let d = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("add_bias", x)?;
        let (m, n) = x.dims2();
        if b.rank() != 1 || b.numel() != n {
            return Err(mismatch("add_bias", x, b));
        }
        let bd = b.data();
        let mut out = x.data().to_vec();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn sum_rows(x: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("sum_rows", x)?;
        let (m, n) = x.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        Ok(Tensor::from_parts(vec![n], out))
    }

    pub fn broadcast_rows(x: &Tensor, rows: usize) -> Result<Tensor, GradError> {
        if x.rank() != 1 || rows == 0 {
            return Err(GradError::Shape {
                op: "broadcast_rows",
                left: x.shape().to_vec(),
                right: vec![rows],
            });
        }
        let n = x.numel();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        Ok(Tensor::from_parts(vec![rows, n], out))
    }

    pub fn sum_cols(x: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("sum_cols", x)?;
        let m = x.rows();
        let out = (0..m).map(|i| x.row(i).iter().sum()).collect();
        Ok(Tensor::from_parts(vec![m, 1], out))
    }

    pub fn broadcast_cols(x: &Tensor, cols: usize) -> Result<Tensor, GradError> {
        if x.rank() != 2 || x.cols() != 1 || cols == 0 {
            return Err(GradError::Shape {
                op: "broadcast_cols",
                left: x.shape().to_vec(),
                right: vec![cols],
            });
        }
        let m = x.rows();
        let mut out = Vec::with_capacity(m * cols);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        Ok(Tensor::from_parts(vec![m, cols], out))
    }

    pub fn softmax(x: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("softmax", x)?;
        let (m, n) = x.dims2();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn softmax_cross_entropy(z: &Tensor, t: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("softmax_cross_entropy", z)?;
        if z.shape() != t.shape() {
            return Err(mismatch("softmax_cross_entropy", z, t));
        }
        let m = z.rows();
        let mut total = 0.0;
        for i in 0..m {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (&zv, &tv) in row.iter().zip(t.row(i)) {
                if tv != 0.0 {
                    total -= tv * (zv - lse);
                }
            }
        }
        Ok(Tensor::scalar(total / m as f64))
    }

    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, GradError> {
        require_rank2("concat_cols", a)?;
        require_rank2("concat_cols", b)?;
        if a.rows() != b.rows() {
            return Err(mismatch("concat_cols", a, b));
        }
        let (m, ca, cb) = (a.rows(), a.cols(), b.cols());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(a.row(i));
            out.extend_from_slice(b.row(i));
        }
        Ok(Tensor::from_parts(vec![m, ca + cb], out))
    }

    pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor, GradError> {
        require_rank2("slice_cols", x)?;
        if len == 0 || start + len > x.cols() {
            return Err(GradError::Shape {
                op: "slice_cols",
                left: x.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let m = x.rows();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Ok(Tensor::from_parts(vec![m, len], out))
    }

    pub fn pad_cols(x: &Tensor, start: usize, total: usize) -> Result<Tensor, GradError> {
        require_rank2("pad_cols", x)?;
        let (m, k) = x.dims2();
        if start + k > total {
            return Err(GradError::Shape {
                op: "pad_cols",
                left: x.shape().to_vec(),
                right: vec![start, total],
            });
        }
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            out[i * total + start..i * total + start + k].copy_from_slice(x.row(i));
        }
        Ok(Tensor::from_parts(vec![m, total], out))
    }
}
