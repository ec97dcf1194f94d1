//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! The [`Tape`] is define-by-run: every operation computes its value when it
//! is recorded, and nodes are appended in topological order. Gradients are
//! themselves recorded on the tape ([`Tape::grad`]), so a gradient can be fed
//! into an optimizer update and differentiated again. This is what makes it
//! possible to reverse-sweep through an unrolled inner optimization loop (see
//! [`unrolled_gradient`]).
//!
//! Shape errors while recording are programming errors and panic. Errors that
//! depend on data (unbound variables, non-finite bindings, degenerate
//! log-sum-exp) are returned as [`Error`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis. `Rows` collapses the row dimension (`r×c → 1×c`), `Cols`
/// collapses the column dimension (`r×c → r×1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Rows,
    Cols,
}

/// Direction for [`Tape::concat`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Join {
    /// Stack vertically.
    Rows,
    /// Place side by side.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    /// `log σ(x)`.
    LogSigmoid,
    Neg,
    Square,
    Sqrt,
    Recip,
    /// `1[x > 0]`; zero derivative everywhere.
    Step,
    /// `scale·x + shift`.
    Affine { scale: f64, shift: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Variable,
    Unary(Unary, Var),
    /// Elementwise with broadcasting of unit dimensions.
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, usize, usize),
    Sum(Var, Axis),
    LogSumExp(Var, Axis),
    Max(Var, Axis),
    /// 0/1 mask of the first maximal entry along an axis; zero derivative.
    ArgmaxMask(Var, Axis),
    /// Row-wise `x - logsumexp(x)`.
    LogSoftmax(Var),
    Concat(Vec<Var>, Join),
    Slice { x: Var, row0: usize, col0: usize, rows: usize, cols: usize },
    /// Embed `x` at an offset inside a zero array of the given shape.
    Pad { x: Var, row0: usize, col0: usize, rows: usize, cols: usize },
    BroadcastTo(Var, usize, usize),
    SumTo(Var, usize, usize),
}

impl Op {
    fn any_parent(&self, mut f: impl FnMut(Var) -> bool) -> bool {
        match self {
            Op::Constant | Op::Variable => false,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => f(*a) || f(*b),
            Op::Concat(parts, _) => parts.iter().any(|&p| f(p)),
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Reshape(x, ..)
            | Op::Sum(x, _)
            | Op::LogSumExp(x, _)
            | Op::Max(x, _)
            | Op::ArgmaxMask(x, _)
            | Op::LogSoftmax(x)
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::BroadcastTo(x, ..)
            | Op::SumTo(x, ..) => f(*x),
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Variable => vec![],
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Reshape(x, ..)
            | Op::Sum(x, _)
            | Op::LogSumExp(x, _)
            | Op::Max(x, _)
            | Op::ArgmaxMask(x, _)
            | Op::LogSoftmax(x)
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::BroadcastTo(x, ..)
            | Op::SumTo(x, ..) => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Ordered node list plus a name registry for variables.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    checkpoints: Vec<(String, usize)>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn reduce_shape(shape: (usize, usize), axis: Axis) -> (usize, usize) {
    match axis {
        Axis::All => (1, 1),
        Axis::Rows => (1, shape.1),
        Axis::Cols => (shape.0, 1),
    }
}

/// Group index of element `(r, c)` in the reduced output.
#[inline]
fn reduce_index(r: usize, c: usize, axis: Axis) -> usize {
    match axis {
        Axis::All => 0,
        Axis::Rows => c,
        Axis::Cols => r,
    }
}

fn apply_unary(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::LogSigmoid => log_sigmoid(x),
        Unary::Neg => -x,
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Recip => 1.0 / x,
        Unary::Step => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Affine { scale, shift } => scale * x + shift,
    }
}

/// Numerically stable `log σ(x) = min(x, 0) - ln(1 + e^{-|x|})`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Elementwise `f(a, c)` with unit dimensions broadcast.
fn broadcast_with(a: &Tensor, c: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == c.shape() {
        let data = a.data().iter().zip(c.data()).map(|(&p, &q)| f(p, q)).collect();
        return Tensor::new(a.rows(), a.cols(), data);
    }
    let rows = broadcast_dim(a.rows(), c.rows()).expect("checked at record time");
    let cols = broadcast_dim(a.cols(), c.cols()).expect("checked at record time");
    let (ad, cd) = (a.data(), c.data());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = &ad[if a.rows() == 1 { 0 } else { r * a.cols() }..][..a.cols()];
        let cr = &cd[if c.rows() == 1 { 0 } else { r * c.cols() }..][..c.cols()];
        match (ar.len() == cols, cr.len() == cols) {
            (true, true) => out.extend(ar.iter().zip(cr).map(|(&p, &q)| f(p, q))),
            (true, false) => out.extend(ar.iter().map(|&p| f(p, cr[0]))),
            (false, true) => out.extend(cr.iter().map(|&q| f(ar[0], q))),
            (false, false) => out.extend((0..cols).map(|_| f(ar[0], cr[0]))),
        }
    }
    Tensor::new(rows, cols, out)
}

fn slice(t: &Tensor, row0: usize, col0: usize, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        data.extend_from_slice(&t.row_slice(r)[col0..col0 + cols]);
    }
    Tensor::new(rows, cols, data)
}

fn broadcast_to(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    if t.shape() == (rows, cols) {
        return t.clone();
    }
    broadcast_with(t, &Tensor::zeros(rows, cols), |a, _| a)
}

/// Sum `t` down to `rows×cols`, collapsing the dimensions that are 1 there.
fn sum_to(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    if t.shape() == (rows, cols) {
        return t.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    let c = t.cols();
    for r in 0..t.rows() {
        let tr = if rows == 1 { 0 } else { r };
        let src = &t.data()[r * c..(r + 1) * c];
        let dst = &mut out.data_mut()[tr * cols..(tr + 1) * cols];
        if cols == 1 {
            dst[0] += src.iter().sum::<f64>();
        } else {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    out
}

fn forward<V: Values + ?Sized>(op: &Op, nodes: &V) -> Result<Tensor> {
    let val = |v: &Var| nodes.get(*v);
    Ok(match op {
        Op::Constant | Op::Variable => unreachable!("leaves have no forward rule"),
        Op::Unary(u, x) => {
            let t = val(x);
            match *u {
                Unary::Exp => t.map(f64::exp),
                Unary::Log => t.map(f64::ln),
                Unary::Tanh => t.map(f64::tanh),
                Unary::Neg => t.map(|v| -v),
                Unary::Square => t.map(|v| v * v),
                Unary::Affine { scale, shift } => t.map(|v| scale * v + shift),
                op => t.map(|v| apply_unary(op, v)),
            }
        }
        Op::Binary(b, x, y) => {
            let (a, c) = (val(x), val(y));
            match b {
                Binary::Add => broadcast_with(a, c, |p, q| p + q),
                Binary::Sub => broadcast_with(a, c, |p, q| p - q),
                Binary::Mul => broadcast_with(a, c, |p, q| p * q),
                Binary::Div => broadcast_with(a, c, |p, q| p / q),
            }
        }
        Op::MatMul(a, b) => val(a).matmul(val(b)),
        Op::Transpose(x) => val(x).transpose(),
        Op::Reshape(x, r, c) => Tensor::new(*r, *c, val(x).data().to_vec()),
        Op::Sum(x, axis) => {
            let t = val(x);
            let (rr, rc) = reduce_shape(t.shape(), *axis);
            let mut out = vec![0.0; rr * rc];
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    out[reduce_index(r, c, *axis)] += t.get(r, c);
                }
            }
            Tensor::new(rr, rc, out)
        }
        Op::Max(x, axis) => {
            let t = val(x);
            let (rr, rc) = reduce_shape(t.shape(), *axis);
            let mut out = vec![f64::NEG_INFINITY; rr * rc];
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    let g = reduce_index(r, c, *axis);
                    out[g] = out[g].max(t.get(r, c));
                }
            }
            Tensor::new(rr, rc, out)
        }
        Op::ArgmaxMask(x, axis) => {
            let t = val(x);
            let (rr, rc) = reduce_shape(t.shape(), *axis);
            let mut best: Vec<Option<(usize, f64)>> = vec![None; rr * rc];
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    let g = reduce_index(r, c, *axis);
                    let v = t.get(r, c);
                    if best[g].is_none_or(|(_, b)| v > b) {
                        best[g] = Some((r * t.cols() + c, v));
                    }
                }
            }
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for (flat, _) in best.into_iter().flatten() {
                out.data_mut()[flat] = 1.0;
            }
            out
        }
        Op::LogSumExp(x, axis) => {
            let t = val(x);
            let (rr, rc) = reduce_shape(t.shape(), *axis);
            let mut max = vec![f64::NEG_INFINITY; rr * rc];
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    let g = reduce_index(r, c, *axis);
                    max[g] = max[g].max(t.get(r, c));
                }
            }
            if max.contains(&f64::NEG_INFINITY) {
                return Err(Error::DegenerateLogSumExp);
            }
            let mut acc = vec![0.0; rr * rc];
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    let g = reduce_index(r, c, *axis);
                    acc[g] += (t.get(r, c) - max[g]).exp();
                }
            }
            let out = acc.iter().zip(&max).map(|(s, m)| m + s.ln()).collect();
            Tensor::new(rr, rc, out)
        }
        Op::LogSoftmax(x) => {
            let t = val(x);
            let mut out = Vec::with_capacity(t.len());
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return Err(Error::DegenerateLogSumExp);
                }
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(t.rows(), t.cols(), out)
        }
        Op::Concat(parts, join) => {
            let ts: Vec<&Tensor> = parts.iter().map(val).collect();
            match join {
                Join::Rows => {
                    let cols = ts[0].cols();
                    let mut data = Vec::new();
                    for t in &ts {
                        data.extend_from_slice(t.data());
                    }
                    Tensor::new(data.len() / cols.max(1), cols, data)
                }
                Join::Cols => {
                    let rows = ts[0].rows();
                    let cols: usize = ts.iter().map(|t| t.cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in &ts {
                            data.extend_from_slice(t.row_slice(r));
                        }
                    }
                    Tensor::new(rows, cols, data)
                }
            }
        }
        Op::Slice { x, row0, col0, rows, cols } => slice(val(x), *row0, *col0, *rows, *cols),
        Op::Pad { x, row0, col0, rows, cols } => {
            let t = val(x);
            let mut out = Tensor::zeros(*rows, *cols);
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    out.set(row0 + r, col0 + c, t.get(r, c));
                }
            }
            out
        }
        Op::BroadcastTo(x, rows, cols) => broadcast_to(val(x), *rows, *cols),
        Op::SumTo(x, rows, cols) => sum_to(val(x), *rows, *cols),
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    /// Mark the current end of the tape, e.g. the start of an inner step.
    pub fn checkpoint(&mut self, label: impl Into<String>) {
        self.checkpoints.push((label.into(), self.nodes.len()));
    }

    pub fn checkpoints(&self) -> &[(String, usize)] {
        &self.checkpoints
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = forward(&op, self.nodes.as_slice())?;
        Ok(self.push(op, value))
    }

    fn record_ok(&mut self, op: Op) -> Var {
        self.record(op).expect("infallible operation failed")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Register a named leaf. Re-registering a name shadows the old binding.
    pub fn variable(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(Op::Variable, value);
        self.names.insert(name.into(), v);
        v
    }

    /// Constant copy of the current value: cuts the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        self.record_ok(Op::Unary(op, x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }
    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x)
    }
    pub fn step(&mut self, x: Var) -> Var {
        self.unary(Unary::Step, x)
    }
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(Unary::Affine { scale, shift }, x)
    }
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_dim(sa.0, sb.0).is_none() || broadcast_dim(sa.1, sb.1).is_none() {
            panic!("{op:?}: shapes {sa:?} and {sb:?} do not broadcast");
        }
        self.record_ok(Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul: shapes {sa:?} and {sb:?} are incompatible");
        self.record_ok(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        self.record_ok(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.0 * s.1, rows * cols, "reshape {s:?} -> ({rows}, {cols})");
        if s == (rows, cols) {
            return x;
        }
        self.record_ok(Op::Reshape(x, rows, cols))
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        self.record_ok(Op::Sum(x, axis))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.sum(x, Axis::All)
    }

    /// Mean over all entries.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn logsumexp(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.record(Op::LogSumExp(x, axis))
    }

    pub fn max(&mut self, x: Var, axis: Axis) -> Var {
        self.record_ok(Op::Max(x, axis))
    }

    pub fn argmax_mask(&mut self, x: Var, axis: Axis) -> Var {
        self.record_ok(Op::ArgmaxMask(x, axis))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(x))
    }

    pub fn concat(&mut self, parts: &[Var], join: Join) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]);
        for &p in parts {
            let s = self.shape(p);
            match join {
                Join::Rows => assert_eq!(s.1, first.1, "concat rows: column mismatch"),
                Join::Cols => assert_eq!(s.0, first.0, "concat cols: row mismatch"),
            }
        }
        if parts.len() == 1 {
            return parts[0];
        }
        self.record_ok(Op::Concat(parts.to_vec(), join))
    }

    pub fn slice(&mut self, x: Var, row0: usize, col0: usize, rows: usize, cols: usize) -> Var {
        let s = self.shape(x);
        assert!(row0 + rows <= s.0 && col0 + cols <= s.1, "slice out of bounds of {s:?}");
        if (row0, col0, rows, cols) == (0, 0, s.0, s.1) {
            return x;
        }
        self.record_ok(Op::Slice { x, row0, col0, rows, cols })
    }

    /// Row `r` as a `1×c` node.
    pub fn row(&mut self, x: Var, r: usize) -> Var {
        let c = self.shape(x).1;
        self.slice(x, r, 0, 1, c)
    }

    pub fn pad(&mut self, x: Var, row0: usize, col0: usize, rows: usize, cols: usize) -> Var {
        let s = self.shape(x);
        assert!(row0 + s.0 <= rows && col0 + s.1 <= cols, "pad target too small for {s:?}");
        self.record_ok(Op::Pad { x, row0, col0, rows, cols })
    }

    pub fn broadcast_to(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let s = self.shape(x);
        assert!(
            (s.0 == rows || s.0 == 1) && (s.1 == cols || s.1 == 1),
            "cannot broadcast {s:?} to ({rows}, {cols})"
        );
        if s == (rows, cols) {
            return x;
        }
        self.record_ok(Op::BroadcastTo(x, rows, cols))
    }

    pub fn sum_to(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let s = self.shape(x);
        assert!(
            (rows == s.0 || rows == 1) && (cols == s.1 || cols == 1),
            "cannot sum {s:?} down to ({rows}, {cols})"
        );
        if s == (rows, cols) {
            return x;
        }
        self.record_ok(Op::SumTo(x, rows, cols))
    }

    /// Row-wise softmax, `exp(log_softmax(x))`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ls = self.log_softmax(x)?;
        Ok(self.exp(ls))
    }

    /// Dot product of two equally shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    /// Vector-Jacobian product of node `i` with respect to its parent slot
    /// `slot`, recorded on the tape. Returns `None` for a zero contribution.
    fn vjp(&mut self, i: usize, slot: usize, g: Var) -> Option<Var> {
        let y = Var(i);
        let op = self.nodes[i].op.clone();
        let gs = Some;
        match op {
            Op::Constant | Op::Variable => None,
            Op::Unary(u, x) => match u {
                Unary::Exp => gs(self.mul(g, y)),
                Unary::Log => gs(self.div(g, x)),
                Unary::Tanh => {
                    let y2 = self.square(y);
                    let d = self.affine(y2, -1.0, 1.0);
                    gs(self.mul(g, d))
                }
                Unary::Relu => {
                    let mask = self.step(x);
                    gs(self.mul(g, mask))
                }
                Unary::LogSigmoid => {
                    let nx = self.neg(x);
                    let ls = self.log_sigmoid(nx);
                    let s = self.exp(ls);
                    gs(self.mul(g, s))
                }
                Unary::Neg => gs(self.neg(g)),
                Unary::Square => {
                    let two_x = self.scale(x, 2.0);
                    gs(self.mul(g, two_x))
                }
                Unary::Sqrt => {
                    let half_g = self.scale(g, 0.5);
                    gs(self.div(half_g, y))
                }
                Unary::Recip => {
                    let y2 = self.square(y);
                    let t = self.mul(g, y2);
                    gs(self.neg(t))
                }
                Unary::Step => None,
                Unary::Affine { scale, .. } => gs(self.scale(g, scale)),
            },
            Op::Binary(b, a, c) => {
                let target = if slot == 0 { a } else { c };
                let (tr, tc) = self.shape(target);
                let full = match (b, slot) {
                    (Binary::Add, _) | (Binary::Sub, 0) => g,
                    (Binary::Sub, _) => self.neg(g),
                    (Binary::Mul, 0) => self.mul(g, c),
                    (Binary::Mul, _) => self.mul(g, a),
                    (Binary::Div, 0) => self.div(g, c),
                    (Binary::Div, _) => {
                        let gy = self.mul(g, y);
                        let q = self.div(gy, c);
                        self.neg(q)
                    }
                };
                let (fr, fc) = self.shape(full);
                if (fr, fc) == (tr, tc) {
                    Some(full)
                } else if fr >= tr && fc >= tc {
                    Some(self.sum_to(full, tr, tc))
                } else {
                    Some(self.broadcast_to(full, tr, tc))
                }
            }
            Op::MatMul(a, b) => {
                if slot == 0 {
                    let bt = self.transpose(b);
                    gs(self.matmul(g, bt))
                } else {
                    let at = self.transpose(a);
                    gs(self.matmul(at, g))
                }
            }
            Op::Transpose(_) => gs(self.transpose(g)),
            Op::Reshape(x, ..) => {
                let (r, c) = self.shape(x);
                gs(self.reshape(g, r, c))
            }
            Op::Sum(x, _) => {
                let (r, c) = self.shape(x);
                gs(self.broadcast_to(g, r, c))
            }
            Op::LogSumExp(x, _) => {
                let (r, c) = self.shape(x);
                let yb = self.broadcast_to(y, r, c);
                let d = self.sub(x, yb);
                let p = self.exp(d);
                let gb = self.broadcast_to(g, r, c);
                gs(self.mul(gb, p))
            }
            Op::Max(x, axis) => {
                let (r, c) = self.shape(x);
                let mask = self.argmax_mask(x, axis);
                let gb = self.broadcast_to(g, r, c);
                gs(self.mul(gb, mask))
            }
            Op::ArgmaxMask(..) => None,
            Op::LogSoftmax(x) => {
                let (r, c) = self.shape(x);
                let p = self.exp(y);
                let gsum = self.sum(g, Axis::Cols);
                let gsb = self.broadcast_to(gsum, r, c);
                let t = self.mul(p, gsb);
                gs(self.sub(g, t))
            }
            Op::Concat(parts, join) => {
                let mut offset = 0;
                for &p in &parts[..slot] {
                    let s = self.shape(p);
                    offset += if join == Join::Rows { s.0 } else { s.1 };
                }
                let (r, c) = self.shape(parts[slot]);
                gs(match join {
                    Join::Rows => self.slice(g, offset, 0, r, c),
                    Join::Cols => self.slice(g, 0, offset, r, c),
                })
            }
            Op::Slice { x, row0, col0, .. } => {
                let (r, c) = self.shape(x);
                gs(self.pad(g, row0, col0, r, c))
            }
            Op::Pad { x, row0, col0, .. } => {
                let (r, c) = self.shape(x);
                gs(self.slice(g, row0, col0, r, c))
            }
            Op::BroadcastTo(x, ..) => {
                let (r, c) = self.shape(x);
                gs(self.sum_to(g, r, c))
            }
            Op::SumTo(x, ..) => {
                let (r, c) = self.shape(x);
                gs(self.broadcast_to(g, r, c))
            }
        }
    }

    /// Record the gradient of the scalar `output` with respect to `wrt` on
    /// the tape. The returned nodes are differentiable in turn.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (r, c) = self.check_scalar(output)?;
        debug_assert_eq!((r, c), (1, 1));
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(Error::NotOnTape(format!("#{}", w.0)));
            }
        }
        let end = output.0;
        // Nothing before the earliest `wrt` node can carry its influence.
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(end).min(end);
        // Nodes in `start..=end` through which some `wrt` variable
        // influences `output`, indexed from `start`.
        let mut live = vec![false; end + 1 - start];
        for w in wrt {
            if w.0 <= end {
                live[w.0 - start] = true;
            }
        }
        for i in start..=end {
            if !live[i - start] && self.nodes[i].op.any_parent(|p| p.0 >= start && live[p.0 - start]) {
                live[i - start] = true;
            }
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; end + 1 - start];
        adjoint[end - start] = Some(self.scalar(1.0));
        for i in (start..=end).rev() {
            let Some(g) = adjoint[i - start] else { continue };
            if !live[i - start] {
                continue;
            }
            let parents = self.nodes[i].op.parents();
            for (slot, p) in parents.into_iter().enumerate() {
                if p.0 < start || !live[p.0 - start] {
                    continue;
                }
                if let Some(contrib) = self.vjp(i, slot, g) {
                    adjoint[p.0 - start] = Some(match adjoint[p.0 - start] {
                        Some(acc) => self.add(acc, contrib),
                        None => contrib,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0.wrapping_sub(start)).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Numeric gradient values of the scalar `output` with respect to `wrt`.
    ///
    /// Unlike [`Tape::grad`] nothing is recorded: adjoints are plain arrays,
    /// each freed once it has been propagated, so a long tape is swept
    /// without growing it.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check_scalar(output)?;
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(Error::NotOnTape(format!("#{}", w.0)));
            }
        }
        let end = output.0;
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(end).min(end);
        let mut live = vec![false; end + 1 - start];
        for w in wrt {
            if w.0 <= end {
                live[w.0 - start] = true;
            }
        }
        for i in start..=end {
            if !live[i - start] && self.nodes[i].op.any_parent(|p| p.0 >= start && live[p.0 - start]) {
                live[i - start] = true;
            }
        }
        let keep: Vec<bool> = (start..=end).map(|i| wrt.iter().any(|w| w.0 == i)).collect();
        let mut adjoint: Vec<Option<Tensor>> = vec![None; end + 1 - start];
        adjoint[end - start] = Some(Tensor::scalar(1.0));
        for i in (start..=end).rev() {
            if !live[i - start] {
                continue;
            }
            let g = if keep[i - start] { adjoint[i - start].clone() } else { adjoint[i - start].take() };
            let Some(g) = g else { continue };
            let parents = self.nodes[i].op.parents();
            for (slot, p) in parents.into_iter().enumerate() {
                if p.0 < start || !live[p.0 - start] {
                    continue;
                }
                if let Some(contrib) = self.numeric_vjp(i, slot, &g) {
                    match &mut adjoint[p.0 - start] {
                        Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adjoint
                    .get(w.0.wrapping_sub(start))
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*w).0, self.shape(*w).1))
            })
            .collect())
    }

    /// Numeric counterpart of [`Tape::vjp`].
    fn numeric_vjp(&self, i: usize, slot: usize, g: &Tensor) -> Option<Tensor> {
        let y = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        Some(match &self.nodes[i].op {
            Op::Constant | Op::Variable | Op::ArgmaxMask(..) => return None,
            Op::Unary(u, x) => {
                let x = val(*x);
                match *u {
                    Unary::Exp => broadcast_with(g, y, |a, b| a * b),
                    Unary::Log => broadcast_with(g, x, |a, b| a / b),
                    Unary::Tanh => broadcast_with(g, y, |a, b| a * (1.0 - b * b)),
                    Unary::Relu => broadcast_with(g, x, |a, b| if b > 0.0 { a } else { 0.0 }),
                    Unary::LogSigmoid => broadcast_with(g, x, |a, b| a * log_sigmoid(-b).exp()),
                    Unary::Neg => g.map(|a| -a),
                    Unary::Square => broadcast_with(g, x, |a, b| 2.0 * a * b),
                    Unary::Sqrt => broadcast_with(g, y, |a, b| 0.5 * a / b),
                    Unary::Recip => broadcast_with(g, y, |a, b| -a * b * b),
                    Unary::Step => return None,
                    Unary::Affine { scale, .. } => g.map(|a| scale * a),
                }
            }
            Op::Binary(b, a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let target = if slot == 0 { av.shape() } else { cv.shape() };
                let full = match (b, slot) {
                    (Binary::Add, _) | (Binary::Sub, 0) => g.clone(),
                    (Binary::Sub, _) => g.map(|v| -v),
                    (Binary::Mul, 0) => broadcast_with(g, cv, |p, q| p * q),
                    (Binary::Mul, _) => broadcast_with(g, av, |p, q| p * q),
                    (Binary::Div, 0) => broadcast_with(g, cv, |p, q| p / q),
                    (Binary::Div, _) => {
                        let gy = broadcast_with(g, y, |p, q| p * q);
                        broadcast_with(&gy, cv, |p, q| -p / q)
                    }
                };
                sum_to(&full, target.0, target.1)
            }
            Op::MatMul(a, b) => {
                if slot == 0 {
                    g.matmul(&val(*b).transpose())
                } else {
                    val(*a).transpose().matmul(g)
                }
            }
            Op::Transpose(_) => g.transpose(),
            Op::Reshape(x, ..) => {
                let (r, c) = val(*x).shape();
                Tensor::new(r, c, g.data().to_vec())
            }
            Op::Sum(x, _) | Op::SumTo(x, ..) => {
                let (r, c) = val(*x).shape();
                broadcast_to(g, r, c)
            }
            Op::LogSumExp(x, _) => {
                let x = val(*x);
                let (r, c) = x.shape();
                let p = broadcast_with(x, &broadcast_to(y, r, c), |a, b| (a - b).exp());
                broadcast_with(&broadcast_to(g, r, c), &p, |a, b| a * b)
            }
            Op::Max(x, axis) => {
                let x = val(*x);
                let (r, c) = x.shape();
                let mask = forward(&Op::ArgmaxMask(Var(0), *axis), std::slice::from_ref(x)).ok()?;
                broadcast_with(&broadcast_to(g, r, c), &mask, |a, b| a * b)
            }
            Op::LogSoftmax(_) => {
                let (r, c) = y.shape();
                let mut out = Vec::with_capacity(r * c);
                for row in 0..r {
                    let gr = g.row_slice(row);
                    let s: f64 = gr.iter().sum();
                    out.extend(gr.iter().zip(y.row_slice(row)).map(|(a, b)| a - b.exp() * s));
                }
                Tensor::new(r, c, out)
            }
            Op::Concat(parts, join) => {
                let mut offset = 0;
                for p in &parts[..slot] {
                    let s = val(*p).shape();
                    offset += if *join == Join::Rows { s.0 } else { s.1 };
                }
                let (r, c) = val(parts[slot]).shape();
                match join {
                    Join::Rows => slice(g, offset, 0, r, c),
                    Join::Cols => slice(g, 0, offset, r, c),
                }
            }
            Op::Slice { x, row0, col0, .. } => {
                let (r, c) = val(*x).shape();
                let mut out = Tensor::zeros(r, c);
                for rr in 0..g.rows() {
                    out.data_mut()[(row0 + rr) * c + col0..][..g.cols()].copy_from_slice(g.row_slice(rr));
                }
                out
            }
            Op::Pad { x, row0, col0, .. } => {
                let (r, c) = val(*x).shape();
                slice(g, *row0, *col0, r, c)
            }
            Op::BroadcastTo(x, ..) => {
                let (r, c) = val(*x).shape();
                sum_to(g, r, c)
            }
        })
    }

    /// Gradient keyed by registered variable names.
    pub fn gradient_by_name(
        &mut self,
        output: Var,
        names: &[&str],
    ) -> Result<HashMap<String, Tensor>> {
        let vars = names
            .iter()
            .map(|n| self.lookup(n).ok_or_else(|| Error::NotOnTape(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.gradient(output, &vars)?;
        Ok(names.iter().map(|n| n.to_string()).zip(grads).collect())
    }

    fn check_scalar(&self, v: Var) -> Result<(usize, usize)> {
        if v.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(format!("#{}", v.0)));
        }
        match self.shape(v) {
            (1, 1) => Ok((1, 1)),
            (r, c) => Err(Error::NonScalarOutput(r, c)),
        }
    }

    /// Replay the whole tape with new values for the named variables.
    ///
    /// Every registered variable must be bound with a finite array of the
    /// recorded shape. Returns the recomputed values of `outputs`.
    pub fn evaluate(
        &self,
        bindings: &HashMap<String, Tensor>,
        outputs: &[Var],
    ) -> Result<Vec<Tensor>> {
        let mut by_index: HashMap<usize, &Tensor> = HashMap::new();
        for (name, &v) in &self.names {
            let t = bindings.get(name).ok_or_else(|| Error::UnboundVariable(name.clone()))?;
            if t.shape() != self.shape(v) {
                return Err(Error::ShapeMismatch(format!(
                    "binding `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.shape(v)
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("binding `{name}`")));
            }
            by_index.insert(v.0, t);
        }
        let last = outputs.iter().map(|v| v.0).max().unwrap_or(0);
        let mut values: Vec<Tensor> = Vec::with_capacity(last + 1);
        for (i, node) in self.nodes.iter().enumerate().take(last + 1) {
            let v = match &node.op {
                Op::Constant => node.value.clone(),
                // Shadowed variables keep their recorded value.
                Op::Variable => by_index.get(&i).map_or_else(|| node.value.clone(), |t| (*t).clone()),
                op => forward(op, values.as_slice())?,
            };
            values.push(v);
        }
        Ok(outputs.iter().map(|v| values[v.0].clone()).collect())
    }
}

trait Values {
    fn get(&self, v: Var) -> &Tensor;
}

impl Values for [Node] {
    fn get(&self, v: Var) -> &Tensor {
        &self[v.0].value
    }
}

impl Values for [Tensor] {
    fn get(&self, v: Var) -> &Tensor {
        &self[v.0]
    }
}

/// Differentiate `outer_loss` through `steps` applications of `inner_step`.
///
/// `init` is the inner state before the first step (e.g. variational
/// parameters ψ₀). Each call of `inner_step(tape, t, state)` must build the
/// next state from tape primitives only. The returned gradients are with
/// respect to `wrt`, the variables created before step 1, and include every
/// path through the unrolled trajectory.
pub fn unrolled_gradient<S, L>(
    tape: &mut Tape,
    wrt: &[Var],
    init: Vec<Var>,
    steps: usize,
    mut inner_step: S,
    outer_loss: L,
) -> Result<Vec<Tensor>>
where
    S: FnMut(&mut Tape, usize, &[Var]) -> Result<Vec<Var>>,
    L: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut state = init;
    for t in 0..steps {
        tape.checkpoint(format!("inner-{t}"));
        let next = inner_step(tape, t, &state)?;
        if next.len() != state.len() {
            return Err(Error::NonDifferentiable(format!(
                "step {t} changed the state arity from {} to {}",
                state.len(),
                next.len()
            )));
        }
        for (old, new) in state.iter().zip(&next) {
            let detached = matches!(tape.node(*new).op, Op::Constant)
                && !matches!(tape.node(*old).op, Op::Constant);
            if detached {
                return Err(Error::NonDifferentiable(format!(
                    "step {t} returned a detached value"
                )));
            }
        }
        state = next;
    }
    tape.checkpoint("outer");
    let loss = outer_loss(tape, &state)?;
    tape.gradient(loss, wrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::row(vec![1.0, 2.0]));
        let sq = t.square(x);
        let y = t.sum_all(sq);
        assert_eq!(t.item(y), 5.0);
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn logsumexp_of_zeros() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::row(vec![0.0, 0.0]));
        let y = t.logsumexp(x, Axis::All).unwrap();
        assert_relative_eq!(t.item(y), std::f64::consts::LN_2, epsilon = 1e-15);
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_at_zero_and_derivative() {
        let mut t = Tape::new();
        let z = t.variable("z", Tensor::scalar(0.0));
        let y = t.tanh(z);
        assert_eq!(t.item(y), 0.0);

        let mut t = Tape::new();
        let x = t.variable("x", Tensor::scalar(0.3));
        let y = t.tanh(x);
        let g = t.gradient(y, &[x]).unwrap()[0].item();
        // central difference, h = 1e-6
        let h = 1e-6;
        let fd = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
        assert_relative_eq!(g, fd, max_relative = 1e-8);
        assert_relative_eq!(g, 0.915_13, epsilon = 1e-5);
    }

    #[test]
    fn logsumexp_all_neg_inf_is_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![f64::NEG_INFINITY; 3]));
        assert!(matches!(t.logsumexp(x, Axis::All), Err(Error::DegenerateLogSumExp)));
        assert!(matches!(t.log_softmax(x), Err(Error::DegenerateLogSumExp)));
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1000.0, 1000.0]));
        let y = t.logsumexp(x, Axis::All).unwrap();
        assert_relative_eq!(t.item(y), 1000.0 + std::f64::consts::LN_2, epsilon = 1e-12);
        let ls = t.log_softmax(x).unwrap();
        assert!(t.value(ls).is_finite());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::row(vec![1.0, 2.0]));
        let y = t.exp(x);
        assert!(matches!(t.gradient(y, &[x]), Err(Error::NonScalarOutput(1, 2))));
    }

    #[test]
    fn unknown_variable_rejected() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::scalar(1.0));
        let y = t.exp(x);
        assert!(matches!(t.gradient_by_name(y, &["nope"]), Err(Error::NotOnTape(_))));
        assert!(matches!(t.gradient(y, &[Var(99)]), Err(Error::NotOnTape(_))));
    }

    #[test]
    fn evaluate_replays_with_new_bindings() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::row(vec![1.0, 2.0]));
        let sq = t.square(x);
        let y = t.sum_all(sq);
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::row(vec![3.0, 4.0]));
        let out = t.evaluate(&b, &[y]).unwrap();
        assert_eq!(out[0].item(), 25.0);
        let again = t.evaluate(&b, &[y]).unwrap();
        assert_eq!(out[0].item().to_bits(), again[0].item().to_bits());
    }

    #[test]
    fn evaluate_errors() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::row(vec![1.0, 2.0]));
        let y = t.sum_all(x);
        let empty = HashMap::new();
        assert!(matches!(t.evaluate(&empty, &[y]), Err(Error::UnboundVariable(_))));
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::row(vec![1.0]));
        assert!(matches!(t.evaluate(&b, &[y]), Err(Error::ShapeMismatch(_))));
        b.insert("x".to_string(), Tensor::row(vec![1.0, f64::NAN]));
        assert!(matches!(t.evaluate(&b, &[y]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn second_derivative_through_recorded_gradient() {
        // f(x) = x^3 via x * x^2; f'' = 6x
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::scalar(1.5));
        let x2 = t.square(x);
        let f = t.mul(x, x2);
        let g = t.grad(f, &[x]).unwrap()[0];
        assert_relative_eq!(t.item(g), 3.0 * 1.5 * 1.5, epsilon = 1e-12);
        let h = t.gradient(g, &[x]).unwrap()[0].item();
        assert_relative_eq!(h, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn relu_second_derivative_is_zero() {
        let mut t = Tape::new();
        let x = t.variable("x", Tensor::scalar(0.0));
        let r = t.relu(x);
        let g = t.grad(r, &[x]).unwrap()[0];
        assert_eq!(t.item(g), 0.0);
        let h = t.gradient(g, &[x]).unwrap()[0].item();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn unrolled_one_gradient_step() {
        // inner: psi1 = psi0 - lr * d/dpsi (psi - phi)^2 with lr = 0.5, psi0 = 0
        // gives psi1 = phi; outer L = psi1^2 so dL/dphi = 2 phi.
        let mut t = Tape::new();
        let phi = t.variable("phi", Tensor::scalar(1.0));
        let psi0 = t.constant(Tensor::scalar(0.0));
        let g = unrolled_gradient(
            &mut t,
            &[phi],
            vec![psi0],
            1,
            |tape, _, s| {
                let d = tape.sub(s[0], phi);
                let l = tape.square(d);
                let gr = tape.grad(l, &[s[0]])?[0];
                let upd = tape.scale(gr, -0.5);
                Ok(vec![tape.add(s[0], upd)])
            },
            |tape, s| Ok(tape.square(s[0])),
        )
        .unwrap();
        assert_relative_eq!(g[0].item(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unrolled_with_zero_steps_equals_direct_gradient() {
        let build = |tape: &mut Tape| {
            let phi = tape.variable("phi", Tensor::row(vec![0.3, -0.7]));
            let psi0 = tape.constant(Tensor::row(vec![1.0, 2.0]));
            (phi, psi0)
        };
        let outer = |tape: &mut Tape, phi: Var, psi: Var| {
            let p = tape.mul(phi, psi);
            let e = tape.tanh(p);
            tape.sum_all(e)
        };
        let mut t1 = Tape::new();
        let (phi, psi0) = build(&mut t1);
        let unrolled = unrolled_gradient(
            &mut t1,
            &[phi],
            vec![psi0],
            0,
            |_, _, s| Ok(s.to_vec()),
            |tape, s| Ok(outer(tape, phi, s[0])),
        )
        .unwrap();
        let mut t2 = Tape::new();
        let (phi2, psi02) = build(&mut t2);
        let l = outer(&mut t2, phi2, psi02);
        let direct = t2.gradient(l, &[phi2]).unwrap();
        assert_eq!(unrolled[0], direct[0]);
    }

    #[test]
    fn detached_inner_step_is_rejected() {
        let mut t = Tape::new();
        let phi = t.variable("phi", Tensor::scalar(1.0));
        let psi0 = t.mul(phi, phi);
        let res = unrolled_gradient(
            &mut t,
            &[phi],
            vec![psi0],
            1,
            |tape, _, s| Ok(vec![tape.detach(s[0])]),
            |tape, s| Ok(tape.square(s[0])),
        );
        assert!(matches!(res, Err(Error::NonDifferentiable(_))));
    }

    #[test]
    fn numeric_gradient_matches_recorded() {
        let mut t = Tape::new();
        let a = t.variable("a", Tensor::new(2, 3, vec![0.3, -0.7, 1.1, 0.2, 0.9, -1.4]));
        let b = t.variable("b", Tensor::new(3, 2, vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4]));
        let r = t.variable("r", Tensor::row(vec![0.4, 1.3, 0.7]));
        let c = t.variable("c", Tensor::column(vec![1.5, 2.5]));
        let ab = t.matmul(a, b);
        let ar = t.mul(a, r);
        let ac = t.div(ar, c);
        let e = t.exp(ac);
        let th = t.tanh(a);
        let sq = t.square(th);
        let sum = t.add(e, sq);
        let sub = t.sub(sum, r);
        let ls = t.log_sigmoid(sub);
        let lse = t.logsumexp(ls, Axis::Rows).unwrap();
        let lsm = t.log_softmax(a).unwrap();
        let mx = t.max(lsm, Axis::Cols);
        let tr = t.transpose(ab);
        let cat = t.concat(&[tr, ab], Join::Rows);
        let sl = t.slice(cat, 1, 0, 2, 2);
        let pd = t.pad(sl, 1, 1, 4, 4);
        let rs = t.reshape(pd, 2, 8);
        let rl = t.relu(rs);
        let rp = t.recip(c);
        let sr = t.sqrt(rp);
        let st = t.sum_to(sr, 1, 1);
        let bc = t.broadcast_to(st, 2, 8);
        let prod = t.mul(rl, bc);
        let ln = t.ln(c);
        let af = t.affine(ln, -2.0, 0.5);
        let ng = t.neg(af);
        let parts = [lse, mx, prod, ng].map(|v| t.sum_all(v));
        let mut y = parts[0];
        for p in &parts[1..] {
            y = t.add(y, *p);
        }
        let wrt = [a, b, r, c];
        let recorded = t.grad(y, &wrt).unwrap();
        let numeric = t.gradient(y, &wrt).unwrap();
        for (g, n) in recorded.iter().zip(&numeric) {
            assert!(t.value(*g).max_abs_diff(n) < 1e-12);
        }
    }
}
