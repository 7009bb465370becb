//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are computed eagerly as operations are recorded; calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates gradients for every node that requires them. Handles are
//! plain indices ([`Var`]), so they are `Copy` and cheap to pass around.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::array::Array;
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidArgument {
        op: &'static str,
        message: String,
    },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            GraphError::InvalidArgument { op, message } => {
                write!(f, "{op}: {message}")
            }
        }
    }
}

impl std::error::Error for GraphError {}

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Multiply by a compile-time constant.
    Scale(Var, S),
    AddConst(Var, S),
    /// `m · v` with `m: [r, c]`, `v: [c]` producing `[r]`.
    MatVec(Var, Var),
    /// Broadcast a scalar node over a vector node.
    MulScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    /// Numerically stable softmax over a rank-1 input.
    Softmax(Var),
    /// Natural log with the argument floored at `S::TINY`.
    Ln(Var),
    /// Element mask, already scaled by `1 / keep_prob`.
    Dropout(Var, Vec<S>),
    L2Normalize(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Pick(Var, usize),
    /// Binary cross entropy on a raw logit against a target probability,
    /// fused for numerical stability.
    BceLogits(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    value: Array<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A tape of eagerly evaluated operations.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    train: bool,
}

impl<S: Scalar> Graph<S> {
    /// `train` controls whether [`Graph::dropout`] applies its mask; in
    /// evaluation mode dropout is the identity.
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Array::scalar(v))
    }

    /// A new leaf carrying the same value but cut off from the tape, so no
    /// gradient flows through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array<S> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(op: &'static str, a: &Array<S>, b: &Array<S>) -> Result<()> {
        if a.shape != b.shape {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("add", self.value(a), self.value(b))?;
        let value = Array::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(x, y)| *x + *y)
                .collect(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("sub", self.value(a), self.value(b))?;
        let value = Array::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(x, y)| *x - *y)
                .collect(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("mul", self.value(a), self.value(b))?;
        let value = Array::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(x, y)| *x * *y)
                .collect(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| *v * k).collect(),
        );
        let rg = self.requires(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, S::ZERO - S::ONE)
    }

    pub fn add_const(&mut self, x: Var, k: S) -> Var {
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| *v + k).collect(),
        );
        let rg = self.requires(x);
        self.push(value, Op::AddConst(x, k), rg)
    }

    /// `m · v` for `m: [r, c]` and `v: [c]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let mv = self.value(m);
        let vv = self.value(v);
        if mv.shape.len() != 2 || vv.shape.len() != 1 || mv.shape[1] != vv.shape[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matvec",
                lhs: mv.shape.clone(),
                rhs: vv.shape.clone(),
            });
        }
        let c = mv.shape[1];
        let out: Vec<S> = mv
            .data
            .chunks_exact(c)
            .map(|row| {
                row.iter()
                    .zip(vv.data.iter())
                    .fold(S::ZERO, |acc, (w, x)| acc + *w * *x)
            })
            .collect();
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(Array::vector(out), Op::MatVec(m, v), rg))
    }

    /// Broadcast-multiply scalar node `s` over node `x`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(GraphError::InvalidArgument {
                op: "mul_scalar",
                message: format!("scalar operand has shape {:?}", self.value(s).shape),
            });
        }
        let k = self.value(s).data[0];
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| *v * k).collect(),
        );
        let rg = self.requires(s) || self.requires(x);
        Ok(self.push(value, Op::MulScalar(s, x), rg))
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| f(*v)).collect(),
        );
        let rg = self.requires(x);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max_s(S::ZERO))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            S::ONE / (S::ONE + (S::ZERO - v).exp())
        })
    }

    /// Log with the argument floored at `S::TINY` so that exact zeros (for
    /// example from a saturated sigmoid) do not produce infinities.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.max_s(S::TINY).ln())
    }

    /// Numerically stable softmax over a rank-1 node.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).shape.len() != 1 {
            return Err(GraphError::InvalidArgument {
                op: "softmax",
                message: format!("expected a vector, got shape {:?}", self.value(x).shape),
            });
        }
        let value = Array::vector(self.value(x).softmax_host());
        let rg = self.requires(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Inverted dropout. In evaluation mode this is the identity and returns
    /// `x` itself so values are bit-for-bit unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::InvalidArgument {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = S::from_f64(1.0 / keep);
        let unit = Uniform::new(0.0f64, 1.0);
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| {
                if unit.sample(rng) < keep {
                    scale
                } else {
                    S::ZERO
                }
            })
            .collect();
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x)
                .data
                .iter()
                .zip(mask.iter())
                .map(|(v, m)| *v * *m)
                .collect(),
        );
        let rg = self.requires(x);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    /// `x / max(‖x‖₂, TINY)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let norm = self.value(x).l2_norm().max_s(S::TINY);
        let value = Array::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| *v / norm).collect(),
        );
        let rg = self.requires(x);
        self.push(value, Op::L2Normalize(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for v in &self.value(x).data {
            acc += *v;
        }
        let rg = self.requires(x);
        self.push(Array::scalar(acc), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, S::ONE / S::from_f64(n as f64))
    }

    /// Dot product of two equally shaped nodes, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Concatenate rank-1 nodes into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GraphError::InvalidArgument {
                op: "concat",
                message: "empty input list".to_string(),
            });
        }
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            if self.value(*p).shape.len() != 1 {
                return Err(GraphError::InvalidArgument {
                    op: "concat",
                    message: format!("operand has shape {:?}", self.value(*p).shape),
                });
            }
            data.extend_from_slice(&self.value(*p).data);
            rg |= self.requires(*p);
        }
        Ok(self.push(Array::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous sub-vector `x[start .. start + len]` of a rank-1 node.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 1 || start + len > xv.numel() {
            return Err(GraphError::InvalidArgument {
                op: "slice",
                message: format!(
                    "range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    xv.shape
                ),
            });
        }
        let value = Array::vector(xv.data[start..start + len].to_vec());
        let rg = self.requires(x);
        Ok(self.push(value, Op::Slice(x, start, len), rg))
    }

    /// Single element `x[idx]` of a rank-1 node, as a scalar node.
    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 1 || idx >= xv.numel() {
            return Err(GraphError::InvalidArgument {
                op: "pick",
                message: format!("index {idx} out of bounds for shape {:?}", xv.shape),
            });
        }
        let value = Array::scalar(xv.data[idx]);
        let rg = self.requires(x);
        Ok(self.push(value, Op::Pick(x, idx), rg))
    }

    /// Binary cross entropy `-t·ln σ(x) - (1-t)·ln(1-σ(x))` computed from
    /// the raw logit `x`, in the overflow-safe form
    /// `max(x, 0) - x·t + ln(1 + exp(-|x|))`. The backward rule is
    /// `σ(x) - t`, so a target equal to the detached sigmoid output yields
    /// an exactly zero gradient — including at saturation.
    pub fn bce_logits(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.value(x).numel() != 1 || self.value(t).numel() != 1 {
            return Err(GraphError::InvalidArgument {
                op: "bce_logits",
                message: format!(
                    "expected scalar logit and target, got {:?} and {:?}",
                    self.value(x).shape,
                    self.value(t).shape
                ),
            });
        }
        let xv = self.value(x).data[0];
        let tv = self.value(t).data[0];
        let loss = xv.max_s(S::ZERO) - xv * tv + (S::ZERO - xv.abs()).exp().ln_1p();
        let rg = self.requires(x) || self.requires(t);
        Ok(self.push(Array::scalar(loss), Op::BceLogits(x, t), rg))
    }

    /// Largest deviation of any softmax node's mass from 1, over the whole
    /// tape. Useful as a cheap distribution sanity probe.
    pub fn max_softmax_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for node in &self.nodes {
            if let Op::Softmax(_) = node.op {
                let mass: f64 = node.value.data.iter().map(|v| v.to_f64()).sum();
                worst = worst.max((mass - 1.0).abs());
            }
        }
        worst
    }

    /// Accumulate d(out)/d(node) for every node that requires gradients.
    /// `out` must be a scalar node. Each call propagates through fresh
    /// buffers and adds the result into the stored gradients, so repeated
    /// calls accumulate until [`Graph::clear_grads`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.nodes[out.0].value.numel() != 1 {
            return Err(GraphError::InvalidArgument {
                op: "backward",
                message: format!(
                    "output must be a scalar, got shape {:?}",
                    self.nodes[out.0].value.shape
                ),
            });
        }

        fn buf_of<S: Scalar>(slot: &mut Option<Vec<S>>, n: usize) -> &mut Vec<S> {
            slot.get_or_insert_with(|| vec![S::ZERO; n])
        }

        let nodes = &self.nodes;
        let numel = |v: Var| nodes[v.0].value.numel();
        let mut work: Vec<Option<Vec<S>>> = vec![None; out.0 + 1];
        work[out.0] = Some(vec![S::ONE]);

        // Inputs always precede their op node on the tape, so a descending
        // sweep sees each node's full upstream gradient before using it.
        for i in (0..=out.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match work[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if nodes[a.0].requires_grad {
                        let buf = buf_of(&mut work[a.0], numel(*a));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let buf = buf_of(&mut work[b.0], numel(*b));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].requires_grad {
                        let buf = buf_of(&mut work[a.0], numel(*a));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let buf = buf_of(&mut work[b.0], numel(*b));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d -= *s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let bv = &nodes[b.0].value.data;
                        let buf = buf_of(&mut work[a.0], numel(*a));
                        for ((d, s), x) in buf.iter_mut().zip(g.iter()).zip(bv.iter()) {
                            *d += *s * *x;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let av = &nodes[a.0].value.data;
                        let buf = buf_of(&mut work[b.0], numel(*b));
                        for ((d, s), x) in buf.iter_mut().zip(g.iter()).zip(av.iter()) {
                            *d += *s * *x;
                        }
                    }
                }
                Op::Scale(x, k) => {
                    if nodes[x.0].requires_grad {
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d += *s * *k;
                        }
                    }
                }
                Op::AddConst(x, _) => {
                    if nodes[x.0].requires_grad {
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for (d, s) in buf.iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                }
                Op::MatVec(m, v) => {
                    let c = nodes[m.0].value.shape[1];
                    if nodes[m.0].requires_grad {
                        let vv = &nodes[v.0].value.data;
                        let buf = buf_of(&mut work[m.0], numel(*m));
                        for (i_row, gi) in g.iter().enumerate() {
                            let row = &mut buf[i_row * c..(i_row + 1) * c];
                            for (d, x) in row.iter_mut().zip(vv.iter()) {
                                *d += *gi * *x;
                            }
                        }
                    }
                    if nodes[v.0].requires_grad {
                        let mv = &nodes[m.0].value.data;
                        let buf = buf_of(&mut work[v.0], numel(*v));
                        for (i_row, gi) in g.iter().enumerate() {
                            let row = &mv[i_row * c..(i_row + 1) * c];
                            for (d, w) in buf.iter_mut().zip(row.iter()) {
                                *d += *gi * *w;
                            }
                        }
                    }
                }
                Op::MulScalar(s, x) => {
                    if nodes[s.0].requires_grad {
                        let xv = &nodes[x.0].value.data;
                        let mut acc = S::ZERO;
                        for (gi, xi) in g.iter().zip(xv.iter()) {
                            acc += *gi * *xi;
                        }
                        buf_of(&mut work[s.0], 1)[0] += acc;
                    }
                    if nodes[x.0].requires_grad {
                        let k = nodes[s.0].value.data[0];
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for (d, gi) in buf.iter_mut().zip(g.iter()) {
                            *d += *gi * k;
                        }
                    }
                }
                Op::Tanh(x) => {
                    if nodes[x.0].requires_grad {
                        let yv = &nodes[i].value.data;
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, s), y) in buf.iter_mut().zip(g.iter()).zip(yv.iter()) {
                            *d += *s * (S::ONE - *y * *y);
                        }
                    }
                }
                Op::Relu(x) => {
                    if nodes[x.0].requires_grad {
                        let xv = &nodes[x.0].value.data;
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, s), v) in buf.iter_mut().zip(g.iter()).zip(xv.iter()) {
                            if *v > S::ZERO {
                                *d += *s;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if nodes[x.0].requires_grad {
                        let yv = &nodes[i].value.data;
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, s), y) in buf.iter_mut().zip(g.iter()).zip(yv.iter()) {
                            *d += *s * *y * (S::ONE - *y);
                        }
                    }
                }
                Op::Softmax(x) => {
                    if nodes[x.0].requires_grad {
                        let yv = &nodes[i].value.data;
                        let mut inner = S::ZERO;
                        for (gi, yi) in g.iter().zip(yv.iter()) {
                            inner += *gi * *yi;
                        }
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, gi), yi) in buf.iter_mut().zip(g.iter()).zip(yv.iter()) {
                            *d += *yi * (*gi - inner);
                        }
                    }
                }
                Op::Ln(x) => {
                    if nodes[x.0].requires_grad {
                        let xv = &nodes[x.0].value.data;
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, s), v) in buf.iter_mut().zip(g.iter()).zip(xv.iter()) {
                            *d += *s / v.max_s(S::TINY);
                        }
                    }
                }
                Op::Dropout(x, mask) => {
                    if nodes[x.0].requires_grad {
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, s), m) in buf.iter_mut().zip(g.iter()).zip(mask.iter()) {
                            *d += *s * *m;
                        }
                    }
                }
                Op::L2Normalize(x) => {
                    if nodes[x.0].requires_grad {
                        let norm = nodes[x.0].value.l2_norm().max_s(S::TINY);
                        let yv = &nodes[i].value.data;
                        let mut inner = S::ZERO;
                        for (gi, yi) in g.iter().zip(yv.iter()) {
                            inner += *gi * *yi;
                        }
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for ((d, gi), yi) in buf.iter_mut().zip(g.iter()).zip(yv.iter()) {
                            *d += (*gi - *yi * inner) / norm;
                        }
                    }
                }
                Op::Sum(x) => {
                    if nodes[x.0].requires_grad {
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for d in buf.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = numel(*p);
                        if nodes[p.0].requires_grad {
                            let buf = buf_of(&mut work[p.0], n);
                            for (d, s) in buf.iter_mut().zip(g[offset..offset + n].iter()) {
                                *d += *s;
                            }
                        }
                        offset += n;
                    }
                }
                Op::Slice(x, start, len) => {
                    if nodes[x.0].requires_grad {
                        let buf = buf_of(&mut work[x.0], numel(*x));
                        for (d, s) in buf[*start..*start + *len].iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                }
                Op::Pick(x, idx) => {
                    if nodes[x.0].requires_grad {
                        buf_of(&mut work[x.0], numel(*x))[*idx] += g[0];
                    }
                }
                Op::BceLogits(x, t) => {
                    let xv = nodes[x.0].value.data[0];
                    let tv = nodes[t.0].value.data[0];
                    if nodes[x.0].requires_grad {
                        let sig = S::ONE / (S::ONE + (S::ZERO - xv).exp());
                        buf_of(&mut work[x.0], 1)[0] += g[0] * (sig - tv);
                    }
                    if nodes[t.0].requires_grad {
                        buf_of(&mut work[t.0], 1)[0] += g[0] * (S::ZERO - xv);
                    }
                }
            }
            let store = buf_of(&mut self.grads[i], g.len());
            for (d, s) in store.iter_mut().zip(g.iter()) {
                *d += *s;
            }
        }
        Ok(())
    }
}
