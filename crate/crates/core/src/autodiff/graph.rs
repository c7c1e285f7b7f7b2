//! Dynamic tape of tensor operations with a reverse sweep.
//!
//! Every forward op appends a node whose inputs already exist, so node order
//! is a topological order and the reverse sweep is a single backwards scan.

use std::cell::Cell;
use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    StopGradient,
    MatMul,
    Add,
    Sub,
    Mul,
    Affine,
    Concat,
    Stack,
    Slice,
    Index,
    EmbeddingLookup,
    RepeatRows,
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    SqDiff,
    Softmax,
    LogSoftmax,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::Concat,
        OpKind::Stack,
        OpKind::Slice,
        OpKind::Index,
        OpKind::EmbeddingLookup,
        OpKind::RepeatRows,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SqDiff,
        OpKind::Softmax,
        OpKind::LogSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::StopGradient => "stop_gradient",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Concat => "concat",
            OpKind::Stack => "stack",
            OpKind::Slice => "slice",
            OpKind::Index => "index",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SqDiff => "sq_diff",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of `kind` on the current thread (scales its
/// upstream gradient by 1.5). Used to prove the gradient checker catches a
/// broken primitive. Pass `None` to restore correct behaviour.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

fn backward_fault() -> Option<OpKind> {
    BACKWARD_FAULT.with(|f| f.get())
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Index(Var, usize),
    Row(Var, usize),
    RepeatRows(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SqDiff(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Const => OpKind::StopGradient,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::Concat(_) => OpKind::Concat,
            Op::Stack(_) => OpKind::Stack,
            Op::Slice(..) => OpKind::Slice,
            Op::Index(..) => OpKind::Index,
            Op::Row(..) => OpKind::EmbeddingLookup,
            Op::RepeatRows(_) => OpKind::RepeatRows,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SqDiff(..) => OpKind::SqDiff,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode tape. Build one per forward pass; it is not `Sync` and is
/// meant to be owned by a single thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    decisions: Vec<usize>,
    pins: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (x, y) = (a.data(), b.data());
    if x.len() == y.len() {
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    } else if x.len() == 1 {
        y.iter().map(|&q| f(x[0], q)).collect()
    } else {
        x.iter().map(|&p| f(p, y[0])).collect()
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(Error::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Records a discrete choice made during the forward pass (e.g. a hard
    /// attention argmax) so perturbation-based checks can detect flips.
    pub fn record_decision(&mut self, choice: usize) {
        self.decisions.push(choice);
    }

    pub fn decisions(&self) -> &[usize] {
        &self.decisions
    }

    /// A graph whose pinned values are taken from an earlier run instead of
    /// being computed, so gradient-stopped quantities stay fixed while a
    /// finite-difference check perturbs the inputs.
    pub fn with_replay(pins: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(pins),
            ..Graph::default()
        }
    }

    /// Values produced by [`Graph::pinned`] so far, in order.
    pub fn pins(&self) -> &[Tensor] {
        &self.pins
    }

    /// Constant holding `value`, or the value recorded at the same position
    /// of the replay list when one is set and the shapes agree.
    pub fn pinned(&mut self, value: Tensor) -> Result<Var> {
        let value = match &self.replay {
            Some(r) => match r.get(self.pins.len()) {
                Some(t) if t.shape() == value.shape() => t.clone(),
                _ => value,
            },
            None => value,
        };
        self.pins.push(value.clone());
        self.push(value, Op::Const, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Same value as `v`, but nothing flows back through it.
    pub fn stop_gradient(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.pinned(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let out = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let (x, w) = (tb.data(), ta.data());
                let data = (0..m)
                    .map(|i| dot(&w[i * k..(i + 1) * k], x))
                    .collect();
                Tensor::from_parts(vec![m], data)
            }
            (&[k], &[k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let mut data = vec![0.0; n];
                for (kk, &s) in ta.data().iter().enumerate() {
                    axpy(s, &tb.data()[kk * n..(kk + 1) * n], &mut data);
                }
                Tensor::from_parts(vec![n], data)
            }
            (&[m, k], &[k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let out_row = &mut data[i * n..(i + 1) * n];
                    for kk in 0..k {
                        axpy(ta.data()[i * k + kk], &tb.data()[kk * n..(kk + 1) * n], out_row);
                    }
                }
                Tensor::from_parts(vec![m, n], data)
            }
            _ => return Err(mismatch()),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `(a - b)^2`.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "sq_diff",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        self.binary(
            "sq_diff",
            a,
            b,
            |x, y| (x - y) * (x - y),
            Op::SqDiff(a, b),
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta, tb)?;
        let data = zip_broadcast(ta, tb, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    /// `scale * a + shift`, with constant scale and shift.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| scale * x + shift).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            expect_rank("concat", t, 1)?;
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = data.len();
        self.push(Tensor::from_parts(vec![n], data), Op::Concat(parts.to_vec()), rg)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::Empty("stack"))?;
        let d = self.value(first).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            expect_rank("stack", t, 1)?;
            if t.numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: vec![d],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        self.push(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::Stack(rows.to_vec()),
            rg,
        )
    }

    /// Elements `start..end` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        expect_rank("slice", t, 1)?;
        if start >= end || end > t.numel() {
            return Err(Error::IndexOutOfBounds {
                op: "slice",
                index: end,
                len: t.numel(),
            });
        }
        let out = Tensor::from_parts(vec![end - start], t.data()[start..end].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, start), rg)
    }

    /// Element `i` of a vector, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        expect_rank("index", t, 1)?;
        if i >= t.numel() {
            return Err(Error::IndexOutOfBounds {
                op: "index",
                index: i,
                len: t.numel(),
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        let rg = self.rg(a);
        self.push(out, Op::Index(a, i), rg)
    }

    /// Row `id` of a matrix; backward scatters into that row only.
    pub fn embedding_lookup(&mut self, table: Var, id: usize) -> Result<Var> {
        let t = self.value(table);
        expect_rank("embedding_lookup", t, 2)?;
        if id >= t.shape()[0] {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: t.shape()[0],
            });
        }
        let out = Tensor::from_parts(vec![t.shape()[1]], t.row(id).to_vec());
        let rg = self.rg(table);
        self.push(out, Op::Row(table, id), rg)
    }

    /// Tiles a vector into `n` identical rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Empty("repeat_rows"));
        }
        let t = self.value(a);
        expect_rank("repeat_rows", t, 1)?;
        let d = t.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, d], data), Op::RepeatRows(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("softmax", t, 1)?;
        let out = Tensor::from_parts(vec![t.numel()], softmax(t.data()));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("log_softmax", t, 1)?;
        let out = Tensor::from_parts(vec![t.numel()], log_softmax(t.data()));
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let fault = backward_fault();
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = adj[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let leaf = &mut self.nodes[i];
                let grad = leaf.grad.get_or_insert_with(|| Tensor::zeros(leaf.value.shape()));
                axpy(1.0, &g, grad.data_mut());
                continue;
            }
            let node = &self.nodes[i];
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf | Op::Const => {}
                &Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    match (ta.shape(), tb.shape()) {
                        (&[m, k], &[_]) => {
                            acc(a, &mut |da| {
                                for r in 0..m {
                                    axpy(g[r], tb.data(), &mut da[r * k..(r + 1) * k]);
                                }
                            });
                            acc(b, &mut |db| {
                                for r in 0..m {
                                    axpy(g[r], &ta.data()[r * k..(r + 1) * k], db);
                                }
                            });
                        }
                        (&[k], &[_, n]) => {
                            acc(a, &mut |da| {
                                for (kk, d) in da.iter_mut().enumerate().take(k) {
                                    *d += dot(&tb.data()[kk * n..(kk + 1) * n], &g);
                                }
                            });
                            acc(b, &mut |db| {
                                for kk in 0..k {
                                    axpy(ta.data()[kk], &g, &mut db[kk * n..(kk + 1) * n]);
                                }
                            });
                        }
                        (&[m, k], &[_, n]) => {
                            acc(a, &mut |da| {
                                for r in 0..m {
                                    let grow = &g[r * n..(r + 1) * n];
                                    for kk in 0..k {
                                        da[r * k + kk] += dot(grow, &tb.data()[kk * n..(kk + 1) * n]);
                                    }
                                }
                            });
                            acc(b, &mut |db| {
                                for r in 0..m {
                                    let grow = &g[r * n..(r + 1) * n];
                                    for kk in 0..k {
                                        axpy(ta.data()[r * k + kk], grow, &mut db[kk * n..(kk + 1) * n]);
                                    }
                                }
                            });
                        }
                        _ => unreachable!("matmul shapes validated in forward"),
                    }
                }
                &Op::Add(a, b) => {
                    acc(a, &mut |da| reduce_into(da, &g, |x| x));
                    acc(b, &mut |db| reduce_into(db, &g, |x| x));
                }
                &Op::Sub(a, b) => {
                    acc(a, &mut |da| reduce_into(da, &g, |x| x));
                    acc(b, &mut |db| reduce_into(db, &g, |x| -x));
                }
                &Op::Mul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    acc(a, &mut |da| reduce_product_into(da, &g, tb.data()));
                    acc(b, &mut |db| reduce_product_into(db, &g, ta.data()));
                }
                &Op::SqDiff(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += 2.0 * (ta.data()[j] - tb.data()[j]) * g[j];
                        }
                    });
                    acc(b, &mut |db| {
                        for j in 0..db.len() {
                            db[j] -= 2.0 * (ta.data()[j] - tb.data()[j]) * g[j];
                        }
                    });
                }
                &Op::Affine(a, scale) => {
                    acc(a, &mut |da| axpy(scale, &g, da));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        acc(p, &mut |dp| axpy(1.0, &g[offset..offset + n], dp));
                        offset += n;
                    }
                }
                Op::Stack(rows) => {
                    for (r, &p) in rows.iter().enumerate() {
                        let n = val(p).numel();
                        acc(p, &mut |dp| axpy(1.0, &g[r * n..(r + 1) * n], dp));
                    }
                }
                &Op::Slice(a, start) => {
                    acc(a, &mut |da| axpy(1.0, &g, &mut da[start..start + g.len()]));
                }
                &Op::Index(a, idx) => {
                    acc(a, &mut |da| da[idx] += g[0]);
                }
                &Op::Row(a, row) => {
                    let cols = g.len();
                    acc(a, &mut |da| axpy(1.0, &g, &mut da[row * cols..(row + 1) * cols]));
                }
                &Op::RepeatRows(a) => {
                    let d = val(a).numel();
                    acc(a, &mut |da| {
                        for chunk in g.chunks(d) {
                            axpy(1.0, chunk, da);
                        }
                    });
                }
                &Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                &Op::Log(a) => {
                    let x = val(a).data();
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += g[j] / x[j];
                        }
                    });
                }
                &Op::Exp(a) => {
                    let y = node.value.data();
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += g[j] * y[j];
                        }
                    });
                }
                &Op::Sum(a) => {
                    acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
                }
                &Op::Mean(a) => {
                    let n = val(a).numel() as f64;
                    acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
                }
                &Op::Softmax(a) => {
                    let y = node.value.data();
                    let gy = dot(&g, y);
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += y[j] * (g[j] - gy);
                        }
                    });
                }
                &Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let gsum: f64 = g.iter().sum();
                    acc(a, &mut |da| {
                        for j in 0..da.len() {
                            da[j] += g[j] - y[j].exp() * gsum;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Adds `g` into `dst`, summing over the broadcast when `dst` is a scalar.
fn reduce_into(dst: &mut [f64], g: &[f64], f: impl Fn(f64) -> f64) {
    if dst.len() == g.len() {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += f(x);
        }
    } else {
        dst[0] += g.iter().map(|&x| f(x)).sum::<f64>();
    }
}

/// Adds `g * other` into `dst`, broadcasting whichever side is a scalar.
fn reduce_product_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    if dst.len() == g.len() {
        if other.len() == g.len() {
            for j in 0..dst.len() {
                dst[j] += g[j] * other[j];
            }
        } else {
            axpy(other[0], g, dst);
        }
    } else {
        dst[0] += dot(g, other);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}
