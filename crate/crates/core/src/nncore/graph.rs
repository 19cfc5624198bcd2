//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the list in reverse and accumulates vector-Jacobian products into
//! nodes that require gradients. Parameters enter through
//! [`Graph::param`]; frozen parameters enter as constants and never receive
//! gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// User-defined differentiable operation with a hand-written backward pass.
pub trait CustomOp: fmt::Debug {
    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    MulMask(Var, Vec<f64>),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var, Vec<f64>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, (Var, f64)>,
    frozen: BTreeMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Graph {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf (gradients are recorded for it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter. Repeated calls with the same id return the same
    /// node, so shared weights accumulate into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(v, _)) = self.params.get(&id) {
            return v;
        }
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let p = store.get(id);
        if p.frozen {
            let v = self.constant(p.value.clone());
            self.frozen.insert(id, v);
            v
        } else {
            let v = self.input(p.value.clone());
            self.params.insert(id, (v, p.weight_decay));
            v
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::raw(vec![n, m], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let out = matmul_nt(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::raw(vec![n, m], out), Op::MatMulNt(a, b), rg)
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if !tx.is_matrix() || tb.shape() != [tx.cols()] {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let m = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::raw(tx.shape().to_vec(), out), Op::AddBias(x, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity in evaluation graphs or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0,1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::raw(shape, out), Op::MulMask(x, mask), rg)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::raw(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise |x|; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Scales every row to unit L2 norm. A zero row is a numeric error that
    /// names the row index.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(Error::dim("normalize_rows", format!("{:?}", t.shape())));
        }
        let m = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for (i, row) in out.chunks_mut(m).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Numeric(format!(
                    "zero-norm embedding at row {i} cannot be normalized"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::raw(shape, out), Op::NormalizeRows(x, norms), rg)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Back-propagates from a scalar `loss`. Weight-decay terms `2·wd·W` are
    /// added to the gradients of tracked parameters that carry decay.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for &(v, wd) in self.params.values() {
            if wd > 0.0 {
                let w = self.value(v).data();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; w.len()]);
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi += 2.0 * wd * wi;
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient {bad} at node {i}"
                    )));
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params: self.params.iter().map(|(&id, &(v, _))| (id, v)).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    acc(*a, matmul_nt(g, tb.data(), n, m, k));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(ta.data(), g, n, k, m));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    acc(*a, matmul(g, tb.data(), n, m, k));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(g, ta.data(), n, m, k));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.to_vec());
                if self.rg(*b) {
                    let m = val(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(s, r)| *s += r);
                    }
                    acc(*b, gb);
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                acc(*x, g.iter().zip(out).map(|(gi, &o)| if o > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::MulMask(x, mask) => acc(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::Concat(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * c);
                        for i in 0..n {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        acc(p, gp);
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    acc(*a, g.iter().zip(tb).map(|(gi, y)| gi * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(ta).map(|(gi, x)| gi * x).collect());
                }
            }
            Op::Abs(x) => {
                let tx = val(*x).data();
                acc(*x, g.iter().zip(tx).map(|(gi, &v)| {
                    if v > 0.0 {
                        *gi
                    } else if v < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }).collect());
            }
            Op::Square(x) => {
                let tx = val(*x).data();
                acc(*x, g.iter().zip(tx).map(|(gi, v)| 2.0 * gi * v).collect());
            }
            Op::Exp(x) => {
                let out = node.value.data();
                acc(*x, g.iter().zip(out).map(|(gi, o)| gi * o).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::NormalizeRows(x, norms) => {
                let u = node.value.data();
                let m = node.value.cols();
                let mut gx = vec![0.0; u.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let ur = &u[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let dot: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[i * m + j] = (gr[j] - ur[j] * dot) / nrm;
                    }
                }
                acc(*x, gx);
            }
            Op::Custom(inputs, op) => {
                let tin: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gin = op.backward(&tin, &node.value, g);
                for (&v, gv) in inputs.iter().zip(gin) {
                    acc(v, gv);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::AddBias(..) => "add_bias",
        Op::Relu(_) => "relu",
        Op::MulMask(..) => "dropout",
        Op::Concat(_) => "concat",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::Exp(_) => "exp",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::NormalizeRows(..) => "normalize_rows",
        Op::Custom(..) => "custom",
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a tracked node, zeros if it was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::raw(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient of a trainable parameter; `None` for frozen or unused ones.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.get(&id).map(|&v| self.wrt(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}
