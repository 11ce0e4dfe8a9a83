//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and a single reverse sweep visits them in topological order. A node only
//! participates in the backward sweep when some input requires a gradient;
//! constants and frozen parameters cut the graph.

use super::ops::{self, Activation, CE_FLOOR};
use super::param::{ParamId, ParamStore};
use super::rng::SeedRng;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Activation(Var, Activation),
    Softmax(Var),
    Mask(Var, Vec<f64>),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Scale(Var, f64),
    Add(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter; it receives a gradient only if it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_as(store, id, true)
    }

    /// Records a parameter that additionally must be `live` to receive a gradient.
    pub fn param_as(&mut self, store: &ParamStore, id: ParamId, live: bool) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), live && p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        xv.require_matrix("add_bias")?;
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(Error::dim("affine", xv.shape(), wv.shape()));
        }
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Linear {
            return x;
        }
        let value = ops::activation(self.value(x), kind);
        let rg = self.needs(x);
        self.push(value, Op::Activation(x, kind), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Inverted dropout; returns `x` itself when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SeedRng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), rate, rng)?;
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.needs(x);
        Ok(self.push(value, Op::Mask(x, mask), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::SliceCols(x, start, end), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = ops::mse(self.value(pred), self.value(target))?;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let v = ops::cross_entropy(self.value(probs), labels)?;
        let rg = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy(probs, labels.to_vec()),
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.same_shape(bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1] {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `∂loss/∂p` into `grad` of every live, trainable parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g), true) = (&node.op, g, node.requires_grad) {
                let p = store.get_mut(*id);
                if !p.trainable {
                    continue;
                }
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.shape(), g.data().to_vec());
                }
                if self.needs(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, self.value(*b).shape(), db);
                }
            }
            Op::Activation(x, kind) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dx_row, y_row), g_row) in dx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                        *d = yi * (gi - dot);
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Mask(x, mask) => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = end - start;
                let mut dx = vec![0.0; xv.len()];
                for (dx_row, g_row) in dx.chunks_mut(c).zip(g.data().chunks(w)) {
                    dx_row[*start..*end].copy_from_slice(g_row);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for row in g.data().chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                    }
                    accumulate(grads, *a, self.value(*a).shape(), da);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for row in g.data().chunks(ca + cb) {
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(grads, *b, self.value(*b).shape(), db);
                }
            }
            Op::Mse(p, t) => {
                let pv = self.value(*p);
                let tv = self.value(*t);
                let scale = 2.0 * g.item() / pv.len() as f64;
                let diff: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                if self.needs(*t) {
                    let neg = diff.iter().map(|v| -v).collect();
                    accumulate(grads, *t, tv.shape(), neg);
                }
                if self.needs(*p) {
                    accumulate(grads, *p, pv.shape(), diff);
                }
            }
            Op::CrossEntropy(probs, labels) => {
                let pv = self.value(*probs);
                let c = pv.cols();
                let scale = g.item() / labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv.data()[i * c + y];
                    if p > CE_FLOOR {
                        dp[i * c + y] = -scale / p;
                    }
                }
                accumulate(grads, *probs, pv.shape(), dp);
            }
            Op::Scale(x, factor) => {
                let dx = g.data().iter().map(|v| v * factor).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (acc, d) in existing.data_mut().iter_mut().zip(&delta) {
                *acc += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}
