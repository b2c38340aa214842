//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is built once from leaves, constants and primitive operations,
//! then evaluated against a set of [`Bindings`] for its leaves. Forward values
//! are cached on the graph; [`Graph::backward`] replays the recorded
//! operations in reverse and returns one gradient per leaf.
//!
//! Nodes can only reference nodes created before them, so insertion order is a
//! topological order and the graph is acyclic by construction.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to vector norms inside cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}): invalid input: {detail}")]
    Invalid {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf node {node} `{name}` is not bound")]
    UnboundLeaf { node: usize, name: String },
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("backward called before evaluate")]
    NotEvaluated,
    #[error("backward output node {node} has shape {shape:?}; a scalar is required")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("step h = {h:e} vanishes against leaf entry {index}; use a larger step")]
    StepTooSmall { h: f64, index: usize },
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf { name: String, shape: Vec<usize> },
    Constant(Tensor<S>),
    /// Embedding lookup: `[rows, cols]` ids into a `[V, D]` table, masked positions zero.
    Gather {
        table: Var,
        ids: Vec<usize>,
        mask: Vec<bool>,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, S),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanRows(Var),
    /// Mean over the sequence axis of `[N, L, D]`, counting unmasked positions only.
    MaskedMeanPool { x: Var, mask: Vec<bool> },
    Softmax(Var),
    LogSoftmax(Var),
    CosineRows(Var, Var),
    CosinePairwise(Var, Var),
    SquaredNorm(Var),
    PairwiseSqDist(Var, Var),
    Pick { x: Var, index: Vec<usize> },
    GradReverse(Var, S),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Gather { .. } => "gather",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MeanRows(_) => "mean_rows",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CosineRows(..) => "cosine_rows",
            Op::CosinePairwise(..) => "cosine_pairwise",
            Op::SquaredNorm(_) => "squared_norm",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Pick { .. } => "pick",
            Op::GradReverse(..) => "grad_reverse",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::Gather { table, .. } => vec![*table],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::CosineRows(a, b)
            | Op::CosinePairwise(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumLast(a)
            | Op::MeanRows(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SquaredNorm(a)
            | Op::GradReverse(a, _) => vec![*a],
            Op::MaskedMeanPool { x, .. } | Op::Pick { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    requires_grad: bool,
}

/// Values for the leaves of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings<S> {
    values: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Bindings<S> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, leaf: Var, value: Tensor<S>) -> &mut Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn get(&self, leaf: Var) -> Option<&Tensor<S>> {
        self.values.get(&leaf)
    }

    pub fn get_mut(&mut self, leaf: Var) -> Option<&mut Tensor<S>> {
        self.values.get_mut(&leaf)
    }
}

/// Gradients of a scalar output with respect to every leaf of the graph.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, leaf: Var) -> Option<&Tensor<S>> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<S>> {
        self.grads.remove(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<S>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    values: Vec<Option<Tensor<S>>>,
    evaluated: bool,
}

type OpResult<S> = std::result::Result<Tensor<S>, (bool, String)>;

fn shape_err<S>(detail: impl Into<String>) -> OpResult<S> {
    Err((true, detail.into()))
}

fn invalid<S>(detail: impl Into<String>) -> OpResult<S> {
    Err((false, detail.into()))
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Number of rows and row width when the last axis is treated as the row.
fn last_axis<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let width = t.shape().last().copied().unwrap_or(1);
    let rows = t.len().checked_div(width).unwrap_or(0);
    (rows, width)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>) -> Var {
        let requires_grad = match &op {
            Op::Leaf { .. } => true,
            Op::Constant(_) => false,
            other => other
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "input from another graph");
        }
        self.nodes.push(Node { op, requires_grad });
        self.values.push(None);
        self.evaluated = false;
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input whose value is supplied at evaluation time.
    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> Var {
        self.push(Op::Leaf {
            name: name.into(),
            shape: shape.to_vec(),
        })
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Constant(value))
    }

    /// Looks up rows of `table` (`[V, D]`) for a `[rows, cols]` grid of ids.
    /// Positions where `mask` is false produce zero rows.
    pub fn gather(
        &mut self,
        table: Var,
        ids: Vec<usize>,
        mask: Vec<bool>,
        rows: usize,
        cols: usize,
    ) -> Var {
        self.push(Op::Gather {
            table,
            ids,
            mask,
            rows,
            cols,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.push(Op::Scale(a, c))
    }

    /// `x · w + b` with `x: [N, K]`, `w: [K, M]`, `b: [M]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: S) -> Var {
        self.push(Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::MeanAll(a))
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.push(Op::SumLast(a))
    }

    /// Column means of `[N, M]`, shaped `[1, M]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.push(Op::MeanRows(a))
    }

    pub fn masked_mean_pool(&mut self, x: Var, mask: Vec<bool>) -> Var {
        self.push(Op::MaskedMeanPool { x, mask })
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.push(Op::LogSoftmax(a))
    }

    /// Row-wise cosine similarity of two `[N, P]` arrays, shaped `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::CosineRows(a, b))
    }

    /// All-pairs cosine similarity of `[N, P]` and `[M, P]`, shaped `[N, M]`.
    pub fn cosine_pairwise(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::CosinePairwise(a, b))
    }

    /// Squared l2 norm over the last axis.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.push(Op::SquaredNorm(a))
    }

    /// All-pairs squared Euclidean distance of `[N, P]` and `[M, P]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::PairwiseSqDist(a, b))
    }

    /// `out[i] = x[i, index[i]]` for `x: [N, C]`.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Var {
        self.push(Op::Pick { x, index })
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: Var, scale: S) -> Var {
        self.push(Op::GradReverse(a, scale))
    }

    fn check_var(&self, v: Var) -> Result<(), GraphError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownVar(v.0))
        }
    }

    /// Declared name of a leaf node.
    pub fn leaf_name(&self, v: Var) -> Option<&str> {
        match &self.nodes.get(v.0)?.op {
            Op::Leaf { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn value(&self, v: Var) -> Option<&Tensor<S>> {
        self.values.get(v.0)?.as_ref()
    }

    /// Value of a single-element node after evaluation.
    pub fn scalar(&self, v: Var) -> Option<S> {
        self.value(v)?.item()
    }

    /// Runs the forward pass, caching every node value.
    pub fn evaluate(&mut self, bindings: &Bindings<S>) -> Result<(), GraphError> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            let op_name = node.op.name();
            let value = match &node.op {
                Op::Leaf { name, shape } => {
                    let bound = bindings
                        .get(Var(i))
                        .ok_or_else(|| GraphError::UnboundLeaf {
                            node: i,
                            name: name.clone(),
                        })?;
                    if bound.shape() != shape.as_slice() {
                        return Err(GraphError::Shape {
                            node: i,
                            op: op_name,
                            detail: format!(
                                "leaf `{name}` declared {shape:?}, bound {:?}",
                                bound.shape()
                            ),
                        });
                    }
                    Ok(bound.clone())
                }
                Op::Constant(t) => Ok(t.clone()),
                op => self.forward(op),
            };
            let value = value.map_err(|(is_shape, detail)| {
                if is_shape {
                    GraphError::Shape {
                        node: i,
                        op: op_name,
                        detail,
                    }
                } else {
                    GraphError::Invalid {
                        node: i,
                        op: op_name,
                        detail,
                    }
                }
            })?;
            if !value.all_finite() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: op_name,
                });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        self.values[v.0]
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn forward(&self, op: &Op<S>) -> OpResult<S> {
        match op {
            Op::Leaf { .. } | Op::Constant(_) => unreachable!("handled by evaluate"),
            Op::Gather {
                table,
                ids,
                mask,
                rows,
                cols,
            } => {
                let t = self.val(*table);
                let Some((vocab, dim)) = dims2(t) else {
                    return shape_err(format!("table must be 2-D, got {:?}", t.shape()));
                };
                if ids.len() != rows * cols || mask.len() != rows * cols {
                    return shape_err(format!(
                        "{} ids / {} mask entries for a {rows}x{cols} grid",
                        ids.len(),
                        mask.len()
                    ));
                }
                let mut out = vec![S::zero(); rows * cols * dim];
                for (p, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    if id >= vocab {
                        return invalid(format!("id {id} >= vocabulary size {vocab}"));
                    }
                    out[p * dim..(p + 1) * dim].copy_from_slice(t.row(id));
                }
                Ok(Tensor::new(vec![*rows, *cols, dim], out).expect("consistent"))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return shape_err(format!("{:?} vs {:?}", x.shape(), y.shape()));
                }
                let f: fn(S, S) -> S = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Ok(Tensor::new(x.shape().to_vec(), data).expect("same shape"))
            }
            Op::Scale(a, c) => Ok(self.val(*a).map(|v| v * *c)),
            Op::Affine { x, w, b } => {
                let (xv, wv, bv) = (self.val(*x), self.val(*w), self.val(*b));
                let (Some((n, k)), Some((k2, m))) = (dims2(xv), dims2(wv)) else {
                    return shape_err("affine needs 2-D input and weight");
                };
                if k != k2 || bv.shape() != [m] {
                    return shape_err(format!(
                        "x {:?}, w {:?}, b {:?}",
                        xv.shape(),
                        wv.shape(),
                        bv.shape()
                    ));
                }
                let mut out = matmul_raw(xv.data(), wv.data(), n, k, m);
                for r in 0..n {
                    for (o, &bias) in out[r * m..(r + 1) * m].iter_mut().zip(bv.data()) {
                        *o += bias;
                    }
                }
                Ok(Tensor::new(vec![n, m], out).expect("consistent"))
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (Some((n, k)), Some((k2, m))) = (dims2(av), dims2(bv)) else {
                    return shape_err("matmul needs 2-D operands");
                };
                if k != k2 {
                    return shape_err(format!("{:?} x {:?}", av.shape(), bv.shape()));
                }
                Ok(Tensor::new(vec![n, m], matmul_raw(av.data(), bv.data(), n, k, m))
                    .expect("consistent"))
            }
            Op::Tanh(a) => Ok(self.val(*a).map(S::tanh)),
            Op::Relu(a) => Ok(self.val(*a).map(|v| v.max(S::zero()))),
            Op::Exp(a) => Ok(self.val(*a).map(S::exp)),
            Op::Log(a) => {
                let x = self.val(*a);
                if x.data().iter().any(|&v| v <= S::zero()) {
                    return invalid("log of a non-positive value");
                }
                Ok(x.map(S::ln))
            }
            Op::ClampMin(a, floor) => Ok(self.val(*a).map(|v| v.max(*floor))),
            Op::SumAll(a) => Ok(Tensor::scalar(self.val(*a).data().iter().copied().sum())),
            Op::MeanAll(a) => {
                let x = self.val(*a);
                if x.is_empty() {
                    return invalid("mean of an empty array");
                }
                let n = S::from_usize(x.len()).expect("length fits scalar");
                Ok(Tensor::scalar(x.data().iter().copied().sum::<S>() / n))
            }
            Op::SumLast(a) => {
                let x = self.val(*a);
                if x.rank() == 0 {
                    return shape_err("sum_last of a scalar");
                }
                let (rows, width) = last_axis(x);
                let data = (0..rows)
                    .map(|r| x.data()[r * width..(r + 1) * width].iter().copied().sum())
                    .collect();
                let shape = x.shape()[..x.rank() - 1].to_vec();
                Ok(Tensor::new(shape, data).expect("consistent"))
            }
            Op::MeanRows(a) => {
                let x = self.val(*a);
                let Some((n, m)) = dims2(x) else {
                    return shape_err(format!("mean_rows needs 2-D, got {:?}", x.shape()));
                };
                if n == 0 {
                    return invalid("mean over zero rows");
                }
                let inv = S::one() / S::from_usize(n).expect("fits");
                let mut out = vec![S::zero(); m];
                for r in 0..n {
                    for (o, &v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o *= inv);
                Ok(Tensor::new(vec![1, m], out).expect("consistent"))
            }
            Op::MaskedMeanPool { x, mask } => {
                let xv = self.val(*x);
                let [n, l, d] = *xv.shape() else {
                    return shape_err(format!("pool needs [N, L, D], got {:?}", xv.shape()));
                };
                if mask.len() != n * l {
                    return shape_err(format!("mask has {} entries for {n}x{l}", mask.len()));
                }
                let mut out = vec![S::zero(); n * d];
                for i in 0..n {
                    let count = mask[i * l..(i + 1) * l].iter().filter(|&&m| m).count();
                    if count == 0 {
                        return invalid(format!("row {i} has no unmasked positions"));
                    }
                    let inv = S::one() / S::from_usize(count).expect("fits");
                    let o = &mut out[i * d..(i + 1) * d];
                    for t in 0..l {
                        if mask[i * l + t] {
                            let src = &xv.data()[(i * l + t) * d..(i * l + t + 1) * d];
                            for (acc, &v) in o.iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    o.iter_mut().for_each(|v| *v *= inv);
                }
                Ok(Tensor::new(vec![n, d], out).expect("consistent"))
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let x = self.val(*a);
                if x.rank() == 0 {
                    return shape_err("softmax of a scalar");
                }
                let log = matches!(op, Op::LogSoftmax(_));
                let (rows, width) = last_axis(x);
                let mut out = Vec::with_capacity(x.len());
                for r in 0..rows {
                    let row = &x.data()[r * width..(r + 1) * width];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
                    if log {
                        let lse = max + sum.ln();
                        out.extend(row.iter().map(|&v| v - lse));
                    } else {
                        out.extend(row.iter().map(|&v| (v - max).exp() / sum));
                    }
                }
                Ok(Tensor::new(x.shape().to_vec(), out).expect("consistent"))
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let Some((n, _)) = dims2(av) else {
                    return shape_err("cosine_rows needs 2-D operands");
                };
                if av.shape() != bv.shape() {
                    return shape_err(format!("{:?} vs {:?}", av.shape(), bv.shape()));
                }
                let floor = S::lit(COSINE_NORM_FLOOR);
                let data = (0..n)
                    .map(|i| {
                        let (x, y) = (av.row(i), bv.row(i));
                        dot(x, y) / (norm(x).max(floor) * norm(y).max(floor))
                    })
                    .collect();
                Ok(Tensor::new(vec![n], data).expect("consistent"))
            }
            Op::CosinePairwise(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (Some((n, p)), Some((m, p2))) = (dims2(av), dims2(bv)) else {
                    return shape_err("cosine_pairwise needs 2-D operands");
                };
                if p != p2 {
                    return shape_err(format!("{:?} vs {:?}", av.shape(), bv.shape()));
                }
                let floor = S::lit(COSINE_NORM_FLOOR);
                let bn: Vec<S> = (0..m).map(|j| norm(bv.row(j)).max(floor)).collect();
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let an = norm(av.row(i)).max(floor);
                    for j in 0..m {
                        out.push(dot(av.row(i), bv.row(j)) / (an * bn[j]));
                    }
                }
                Ok(Tensor::new(vec![n, m], out).expect("consistent"))
            }
            Op::SquaredNorm(a) => {
                let x = self.val(*a);
                if x.rank() == 0 {
                    return shape_err("squared_norm of a scalar");
                }
                let (rows, width) = last_axis(x);
                let data = (0..rows)
                    .map(|r| {
                        let row = &x.data()[r * width..(r + 1) * width];
                        dot(row, row)
                    })
                    .collect();
                Ok(Tensor::new(x.shape()[..x.rank() - 1].to_vec(), data).expect("consistent"))
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (Some((n, p)), Some((m, p2))) = (dims2(av), dims2(bv)) else {
                    return shape_err("pairwise_sq_dist needs 2-D operands");
                };
                if p != p2 {
                    return shape_err(format!("{:?} vs {:?}", av.shape(), bv.shape()));
                }
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    for j in 0..m {
                        out.push(
                            av.row(i)
                                .iter()
                                .zip(bv.row(j))
                                .map(|(&x, &y)| (x - y) * (x - y))
                                .sum(),
                        );
                    }
                }
                Ok(Tensor::new(vec![n, m], out).expect("consistent"))
            }
            Op::Pick { x, index } => {
                let xv = self.val(*x);
                let Some((n, c)) = dims2(xv) else {
                    return shape_err("pick needs a 2-D operand");
                };
                if index.len() != n {
                    return shape_err(format!("{} indices for {n} rows", index.len()));
                }
                let mut out = Vec::with_capacity(n);
                for (i, &k) in index.iter().enumerate() {
                    if k >= c {
                        return invalid(format!("index {k} out of range for width {c}"));
                    }
                    out.push(xv.data()[i * c + k]);
                }
                Ok(Tensor::new(vec![n], out).expect("consistent"))
            }
            Op::GradReverse(a, _) => Ok(self.val(*a).clone()),
        }
    }

    /// Gradients of the scalar node `output` with respect to every leaf.
    ///
    /// Leaves the output does not depend on receive zero arrays.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>, GraphError> {
        self.check_var(output)?;
        if !self.evaluated {
            return Err(GraphError::NotEvaluated);
        }
        let out_val = self.val(output);
        if out_val.len() != 1 {
            return Err(GraphError::NonScalarOutput {
                node: output.0,
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out_val.shape(), S::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { shape, .. } = &node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(shape));
                out.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = self.val(Var(i));
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Constant(_) => {}
            Op::Gather {
                table, ids, mask, ..
            } => {
                if !self.wants(*table) {
                    return;
                }
                let t = self.val(*table);
                let dim = t.shape()[1];
                let mut gt = Tensor::zeros(t.shape());
                let gd = gt.data_mut();
                for (p, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                    if m {
                        for (acc, &v) in gd[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g.data()[p * dim..(p + 1) * dim])
                        {
                            *acc += v;
                        }
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|v| v * *c));
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, k) = dims2(xv).expect("checked in forward");
                let m = wv.shape()[1];
                if self.wants(*x) {
                    let gx = matmul_a_bt(g.data(), wv.data(), n, m, k);
                    accumulate(grads, *x, Tensor::new(vec![n, k], gx).expect("shape"));
                }
                if self.wants(*w) {
                    let gw = matmul_at_b(xv.data(), g.data(), n, k, m);
                    accumulate(grads, *w, Tensor::new(vec![k, m], gw).expect("shape"));
                }
                if self.wants(*b) {
                    let mut gb = vec![S::zero(); m];
                    for r in 0..n {
                        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![m], gb).expect("shape"));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k) = dims2(av).expect("checked in forward");
                let m = bv.shape()[1];
                if self.wants(*a) {
                    let ga = matmul_a_bt(g.data(), bv.data(), n, m, k);
                    accumulate(grads, *a, Tensor::new(vec![n, k], ga).expect("shape"));
                }
                if self.wants(*b) {
                    let gb = matmul_at_b(av.data(), g.data(), n, k, m);
                    accumulate(grads, *b, Tensor::new(vec![k, m], gb).expect("shape"));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * (S::one() - yv * yv)));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    accumulate(
                        grads,
                        *a,
                        zip_map(g, x, |gv, xv| if xv > S::zero() { gv } else { S::zero() }),
                    );
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    accumulate(grads, *a, zip_map(g, x, |gv, xv| gv / xv));
                }
            }
            Op::ClampMin(a, floor) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let f = *floor;
                    accumulate(
                        grads,
                        *a,
                        zip_map(g, x, |gv, xv| if xv > f { gv } else { S::zero() }),
                    );
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let mut v = g.data()[0];
                    if matches!(self.nodes[i].op, Op::MeanAll(_)) {
                        v /= S::from_usize(x.len()).expect("fits");
                    }
                    accumulate(grads, *a, Tensor::filled(x.shape(), v));
                }
            }
            Op::SumLast(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let (rows, width) = last_axis(x);
                    let data = (0..rows * width).map(|p| g.data()[p / width]).collect();
                    accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let (n, m) = dims2(x).expect("checked");
                    let inv = S::one() / S::from_usize(n).expect("fits");
                    let data = (0..n * m).map(|p| g.data()[p % m] * inv).collect();
                    accumulate(grads, *a, Tensor::new(vec![n, m], data).expect("shape"));
                }
            }
            Op::MaskedMeanPool { x, mask } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let [n, l, d] = *xv.shape() else { unreachable!() };
                    let mut gx = Tensor::zeros(xv.shape());
                    let gd = gx.data_mut();
                    for i in 0..n {
                        let count = mask[i * l..(i + 1) * l].iter().filter(|&&m| m).count();
                        let inv = S::one() / S::from_usize(count).expect("fits");
                        let gi = &g.data()[i * d..(i + 1) * d];
                        for t in 0..l {
                            if mask[i * l + t] {
                                let dst = &mut gd[(i * l + t) * d..(i * l + t + 1) * d];
                                for (o, &v) in dst.iter_mut().zip(gi) {
                                    *o = v * inv;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let (rows, width) = last_axis(y);
                    let mut out = Vec::with_capacity(y.len());
                    for r in 0..rows {
                        let yr = &y.data()[r * width..(r + 1) * width];
                        let gr = &g.data()[r * width..(r + 1) * width];
                        let s = dot(yr, gr);
                        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let (rows, width) = last_axis(y);
                    let mut out = Vec::with_capacity(y.len());
                    for r in 0..rows {
                        let yr = &y.data()[r * width..(r + 1) * width];
                        let gr = &g.data()[r * width..(r + 1) * width];
                        let s: S = gr.iter().copied().sum();
                        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * s));
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out).expect("shape"));
                }
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, p) = dims2(av).expect("checked");
                let mut ga = vec![S::zero(); n * p];
                let mut gb = vec![S::zero(); n * p];
                for r in 0..n {
                    let (x, z) = (av.row(r), bv.row(r));
                    let gr = g.data()[r];
                    cosine_grad(x, z, y.data()[r], gr, &mut ga[r * p..(r + 1) * p]);
                    cosine_grad(z, x, y.data()[r], gr, &mut gb[r * p..(r + 1) * p]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(vec![n, p], ga).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(vec![n, p], gb).expect("shape"));
                }
            }
            Op::CosinePairwise(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, p) = dims2(av).expect("checked");
                let m = bv.shape()[0];
                let mut ga = vec![S::zero(); n * p];
                let mut gb = vec![S::zero(); m * p];
                for r in 0..n {
                    for c in 0..m {
                        let (x, z) = (av.row(r), bv.row(c));
                        let s = y.data()[r * m + c];
                        let gv = g.data()[r * m + c];
                        cosine_grad(x, z, s, gv, &mut ga[r * p..(r + 1) * p]);
                        cosine_grad(z, x, s, gv, &mut gb[c * p..(c + 1) * p]);
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(vec![n, p], ga).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(vec![m, p], gb).expect("shape"));
                }
            }
            Op::SquaredNorm(a) => {
                if self.wants(*a) {
                    let x = self.val(*a);
                    let (_, width) = last_axis(x);
                    let data = x
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(p, &v)| S::lit(2.0) * v * g.data()[p / width])
                        .collect();
                    accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, p) = dims2(av).expect("checked");
                let m = bv.shape()[0];
                let two = S::lit(2.0);
                let mut ga = vec![S::zero(); n * p];
                let mut gb = vec![S::zero(); m * p];
                for r in 0..n {
                    for c in 0..m {
                        let gv = g.data()[r * m + c] * two;
                        for k in 0..p {
                            let diff = av.row(r)[k] - bv.row(c)[k];
                            ga[r * p + k] += gv * diff;
                            gb[c * p + k] -= gv * diff;
                        }
                    }
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(vec![n, p], ga).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(vec![m, p], gb).expect("shape"));
                }
            }
            Op::Pick { x, index } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let c = xv.shape()[1];
                    let mut gx = Tensor::zeros(xv.shape());
                    for (r, &k) in index.iter().enumerate() {
                        gx.data_mut()[r * c + k] += g.data()[r];
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::GradReverse(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|v| -(v * *c)));
                }
            }
        }
    }
}

/// Adds `gr · ∂cos(x, z)/∂x` into `out`. A zero vector gets zero gradient.
fn cosine_grad<S: Scalar>(x: &[S], z: &[S], cos: S, gr: S, out: &mut [S]) {
    let floor = S::lit(COSINE_NORM_FLOOR);
    let nx = norm(x);
    if nx == S::zero() {
        return;
    }
    let nz = norm(z).max(floor);
    if nx < floor {
        // Norm clamped: the denominator is constant in x.
        for (o, &zv) in out.iter_mut().zip(z) {
            *o += gr * zv / (floor * nz);
        }
        return;
    }
    let inv = S::one() / (nx * nz);
    let k = cos / (nx * nx);
    for ((o, &xv), &zv) in out.iter_mut().zip(x).zip(z) {
        *o += gr * (zv * inv - k * xv);
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `[n, k] · [k, m]`.
fn matmul_raw<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `g [n, m] · bᵀ` where `b` is `[k, m]`.
fn matmul_a_bt<S: Scalar>(g: &[S], b: &[S], n: usize, m: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * k];
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(gi, &b[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[n, k]` and `g` is `[n, m]`.
fn matmul_at_b<S: Scalar>(a: &[S], g: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * m];
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(gi) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Largest relative discrepancy between the analytic gradient of `output`
/// with respect to `leaf` and a central difference with step `h`.
///
/// Per entry the error is `|a − n| / max(1e-12, |a| + |n|)`. The graph is
/// left evaluated at the original bindings.
pub fn gradient_check<S: Scalar>(
    graph: &mut Graph<S>,
    bindings: &Bindings<S>,
    output: Var,
    leaf: Var,
    h: S,
) -> Result<S, GraphError> {
    graph.check_var(leaf)?;
    let leaf_name = graph
        .leaf_name(leaf)
        .ok_or(GraphError::Invalid {
            node: leaf.0,
            op: "gradient_check",
            detail: "not a leaf".into(),
        })?
        .to_string();
    if h <= S::zero() {
        return Err(GraphError::Invalid {
            node: leaf.0,
            op: "gradient_check",
            detail: "step must be positive".into(),
        });
    }
    graph.evaluate(bindings)?;
    let analytic = graph
        .backward(output)?
        .take(leaf)
        .expect("leaf gradient present");
    let base = bindings
        .get(leaf)
        .ok_or(GraphError::UnboundLeaf {
            node: leaf.0,
            name: leaf_name,
        })?
        .clone();

    let mut probe = bindings.clone();
    let mut worst = S::zero();
    let floor = S::lit(1e-12);
    for (index, &x) in base.data().iter().enumerate() {
        let (up, down) = (x + h, x - h);
        if up == x || down == x {
            return Err(GraphError::StepTooSmall {
                h: h.as_f64(),
                index,
            });
        }
        let mut eval_at = |v: S| -> Result<S, GraphError> {
            probe.get_mut(leaf).expect("bound").data_mut()[index] = v;
            graph.evaluate(&probe)?;
            Ok(graph.scalar(output).expect("scalar output"))
        };
        let f_up = eval_at(up)?;
        let f_down = eval_at(down)?;
        probe.get_mut(leaf).expect("bound").data_mut()[index] = x;
        let numeric = (f_up - f_down) / (up - down);
        let a = analytic.data()[index];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    graph.evaluate(bindings)?;
    Ok(worst)
}
