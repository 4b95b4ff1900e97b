//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one computation (typically one sentence) in evaluation
//! order. Every recorded value is a flat vector; matrices only appear as
//! parameters in a [`ParamStore`], read through [`Tape::matvec`]. Calling
//! [`Tape::backward`] replays the record in reverse, accumulating parameter
//! adjoints into a [`Gradients`] buffer.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::{Gradients, ParamId, ParamStore};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    ShapeMismatch { op: &'static str, expected: usize, got: usize },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("loss must be a scalar, got a value of length {0}")]
    NotScalar(usize),
    #[error("value was recorded on a different tape")]
    ForeignValue,
    #[error("class index {target} out of range for {classes} logits")]
    BadTarget { target: usize, classes: usize },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
    len: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Names of the recorded operations. Used for reporting and by the
/// corrupted-backward test hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    Row,
    MatVec,
    Concat,
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    WeightedSum,
    NormalizeBySum,
    SoftmaxCrossEntropy,
    SquaredNorm,
    Sum,
    Scale,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Constant,
        OpKind::Param,
        OpKind::Row,
        OpKind::MatVec,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::WeightedSum,
        OpKind::NormalizeBySum,
        OpKind::SoftmaxCrossEntropy,
        OpKind::SquaredNorm,
        OpKind::Sum,
        OpKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param => "param",
            OpKind::Row => "row",
            OpKind::MatVec => "matvec",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::NormalizeBySum => "normalize",
            OpKind::SoftmaxCrossEntropy => "softmax_xent",
            OpKind::SquaredNorm => "squared_norm",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Row(ParamId, usize),
    MatVec(ParamId, usize),
    Concat(Vec<usize>),
    Add(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    WeightedSum { weights: usize, vectors: Vec<usize> },
    NormalizeBySum(usize),
    SoftmaxCrossEntropy { logits: usize, target: usize, probs: Vec<f64> },
    SquaredNorm(ParamId),
    Sum(Vec<usize>),
    Scale(usize, f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::Row(..) => OpKind::Row,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Concat(_) => OpKind::Concat,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::NormalizeBySum(_) => OpKind::NormalizeBySum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::SquaredNorm(_) => OpKind::SquaredNorm,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Adjoints of every recorded value after a backward pass.
#[derive(Debug, Clone)]
pub struct Adjoints {
    tape: u64,
    values: Vec<Vec<f64>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        (v.tape == self.tape).then(|| self.values[v.index].as_slice())
    }
}

/// Recording of a single dynamic computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    corrupt: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), corrupt: None }
    }

    /// Test hook: the backward rule of `kind` is scaled by 1.5, producing
    /// wrong gradients on purpose.
    pub fn with_corruption(kind: OpKind) -> Self {
        Tape { corrupt: Some(kind), ..Tape::new() }
    }

    pub fn corruption(&self) -> Option<OpKind> {
        self.corrupt
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record. Handles from before the reset become foreign.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "value read through a handle from another tape");
        &self.nodes[v.index].value
    }

    /// Scalar value of a length-1 record.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a value of length {}", value.len());
        value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        let len = value.len();
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1, len }
    }

    fn check(&self, v: Var) -> Result<usize, GraphError> {
        if v.tape == self.id {
            Ok(v.index)
        } else {
            Err(GraphError::ForeignValue)
        }
    }

    fn same_len(op: &'static str, a: Var, b: Var) -> Result<(), GraphError> {
        if a.len == b.len {
            Ok(())
        } else {
            Err(GraphError::ShapeMismatch { op, expected: a.len, got: b.len })
        }
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// The whole parameter, flattened, as a differentiable value.
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> Var {
        self.push(params.get(id).data().to_vec(), Op::Param(id))
    }

    /// One row of a parameter matrix (embedding lookup).
    pub fn row(&mut self, params: &ParamStore, id: ParamId, row: usize) -> Var {
        self.push(params.get(id).row(row).to_vec(), Op::Row(id, row))
    }

    pub fn matvec(&mut self, params: &ParamStore, w: ParamId, x: Var) -> Result<Var, GraphError> {
        let xi = self.check(x)?;
        let m = params.get(w);
        if m.cols() != x.len {
            return Err(GraphError::ShapeMismatch { op: "matvec", expected: m.cols(), got: x.len });
        }
        let value = m.matvec(&self.nodes[xi].value);
        Ok(self.push(value, Op::MatVec(w, xi)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::EmptyInput("concat"));
        }
        let mut value = Vec::with_capacity(parts.iter().map(|p| p.len).sum());
        let mut ids = Vec::with_capacity(parts.len());
        for &p in parts {
            let i = self.check(p)?;
            value.extend_from_slice(&self.nodes[i].value);
            ids.push(i);
        }
        Ok(self.push(value, Op::Concat(ids)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        Self::same_len("add", a, b)?;
        let value = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| x + y).collect();
        Ok(self.push(value, Op::Add(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        Self::same_len("mul", a, b)?;
        let value = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| x * y).collect();
        Ok(self.push(value, Op::Mul(ai, bi)))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var, GraphError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(value, op(ai)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, GraphError> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.iter().map(|x| x * factor).collect();
        Ok(self.push(value, Op::Scale(ai, factor)))
    }

    /// `Σ_i weights[i] * vectors[i]` where `weights` holds one scalar per vector.
    pub fn weighted_sum(&mut self, weights: Var, vectors: &[Var]) -> Result<Var, GraphError> {
        let wi = self.check(weights)?;
        let first = *vectors.first().ok_or(GraphError::EmptyInput("weighted_sum"))?;
        if weights.len != vectors.len() {
            return Err(GraphError::ShapeMismatch { op: "weighted_sum", expected: vectors.len(), got: weights.len });
        }
        let mut value = vec![0.0; first.len];
        let mut ids = Vec::with_capacity(vectors.len());
        for (k, &v) in vectors.iter().enumerate() {
            let vi = self.check(v)?;
            Self::same_len("weighted_sum", first, v)?;
            let w = self.nodes[wi].value[k];
            value.iter_mut().zip(&self.nodes[vi].value).for_each(|(acc, x)| *acc += w * x);
            ids.push(vi);
        }
        Ok(self.push(value, Op::WeightedSum { weights: wi, vectors: ids }))
    }

    /// `x / Σ x`.
    pub fn normalize(&mut self, a: Var) -> Result<Var, GraphError> {
        let ai = self.check(a)?;
        if a.len == 0 {
            return Err(GraphError::EmptyInput("normalize"));
        }
        let total: f64 = self.nodes[ai].value.iter().sum();
        let value = self.nodes[ai].value.iter().map(|x| x / total).collect();
        Ok(self.push(value, Op::NormalizeBySum(ai)))
    }

    /// Fused `-log softmax(logits)[target]`, recorded as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, GraphError> {
        let li = self.check(logits)?;
        if target >= logits.len {
            return Err(GraphError::BadTarget { target, classes: logits.len });
        }
        let z = &self.nodes[li].value;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = log_total - (z[target] - max);
        let probs = softmax(z);
        Ok(self.push(vec![loss], Op::SoftmaxCrossEntropy { logits: li, target, probs }))
    }

    /// `‖θ‖²` of a whole parameter tensor.
    pub fn squared_norm(&mut self, params: &ParamStore, id: ParamId) -> Var {
        self.push(vec![params.get(id).squared_norm()], Op::SquaredNorm(id))
    }

    /// Sum of every element of every input.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        let mut total = 0.0;
        let mut ids = Vec::with_capacity(parts.len());
        for &p in parts {
            let i = self.check(p)?;
            total += self.nodes[i].value.iter().sum::<f64>();
            ids.push(i);
        }
        Ok(self.push(vec![total], Op::Sum(ids)))
    }

    /// Reverse sweep from a scalar `loss`. Parameter adjoints are added into
    /// `grads`; adjoints of every recorded value are returned.
    pub fn backward(&self, loss: Var, params: &ParamStore, grads: &mut Gradients) -> Result<Adjoints, GraphError> {
        let li = self.check(loss)?;
        if loss.len != 1 {
            return Err(GraphError::NotScalar(loss.len));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes[..=li].iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[li][0] = 1.0;

        for idx in (0..=li).rev() {
            let node = &self.nodes[idx];
            let mut g = std::mem::take(&mut adj[idx]);
            if g.iter().all(|&x| x == 0.0) {
                adj[idx] = g;
                continue;
            }
            let factor = if self.corrupt == Some(node.op.kind()) { 1.5 } else { 1.0 };
            if factor != 1.0 {
                g.iter_mut().for_each(|x| *x *= factor);
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    grads.get_mut(*id).data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Row(id, r) => {
                    grads.row_mut(*id, *r).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::MatVec(w, x) => {
                    let m = params.get(*w);
                    let cols = m.cols();
                    let xv = &self.nodes[*x].value;
                    let gw = grads.get_mut(*w).data_mut();
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        gw[r * cols..(r + 1) * cols].iter_mut().zip(xv).for_each(|(a, xv)| *a += gr * xv);
                    }
                    let gx = &mut adj[*x];
                    for (r, &gr) in g.iter().enumerate() {
                        gx.iter_mut().zip(m.row(r)).for_each(|(a, w)| *a += gr * w);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        adj[p].iter_mut().zip(&g[offset..offset + n]).for_each(|(a, b)| *a += b);
                        offset += n;
                    }
                }
                Op::Add(a, b) => {
                    adj[*a].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    adj[*b].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for k in 0..g.len() {
                        adj[*a][k] += g[k] * bv[k];
                        adj[*b][k] += g[k] * av[k];
                    }
                }
                Op::Sigmoid(a) => {
                    adj[*a].iter_mut().zip(&g).zip(&node.value).for_each(|((x, gy), y)| *x += gy * y * (1.0 - y));
                }
                Op::Tanh(a) => {
                    adj[*a].iter_mut().zip(&g).zip(&node.value).for_each(|((x, gy), y)| *x += gy * (1.0 - y * y));
                }
                Op::Exp(a) => {
                    adj[*a].iter_mut().zip(&g).zip(&node.value).for_each(|((x, gy), y)| *x += gy * y);
                }
                Op::Scale(a, c) => {
                    adj[*a].iter_mut().zip(&g).for_each(|(x, gy)| *x += c * gy);
                }
                Op::WeightedSum { weights, vectors } => {
                    for (k, &v) in vectors.iter().enumerate() {
                        let vv = &self.nodes[v].value;
                        let dot: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                        adj[*weights][k] += dot;
                        let w = self.nodes[*weights].value[k];
                        adj[v].iter_mut().zip(&g).for_each(|(x, gy)| *x += w * gy);
                    }
                }
                Op::NormalizeBySum(a) => {
                    let total: f64 = self.nodes[*a].value.iter().sum();
                    let proj: f64 = g.iter().zip(&node.value).map(|(gy, y)| gy * y).sum();
                    adj[*a].iter_mut().zip(&g).for_each(|(x, gy)| *x += (gy - proj) / total);
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let gy = g[0];
                    for (k, p) in probs.iter().enumerate() {
                        let t = if k == *target { 1.0 } else { 0.0 };
                        adj[*logits][k] += gy * (p - t);
                    }
                }
                Op::SquaredNorm(id) => {
                    let theta = params.get(*id).data();
                    let gy = g[0];
                    grads.get_mut(*id).data_mut().iter_mut().zip(theta).for_each(|(a, t)| *a += 2.0 * gy * t);
                }
                Op::Sum(parts) => {
                    let gy = g[0];
                    for &p in parts {
                        adj[p].iter_mut().for_each(|x| *x += gy);
                    }
                }
            }
            adj[idx] = g;
        }
        Ok(Adjoints { tape: self.id, values: adj })
    }
}
