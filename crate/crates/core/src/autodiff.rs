//! Tape-based reverse-mode automatic differentiation over small dense
//! row-major matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated (define-by-run).
//! Leaves are either parameters, which receive gradients, or constants.
//! [`Tape::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every parameter leaf.
//!
//! ```
//! use vbgp_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.parameter(1, 1, vec![3.0]);
//! let y = x.square();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```
//!
//! Binary elementwise primitives accept operands of equal shape or a 1x1
//! scalar paired with any shape. The operator overloads (`+ - * /`) panic on
//! a shape mismatch; the named `try_*` methods return an error instead.
//!
//! The first non-finite value produced on a tape is recorded together with the
//! primitive that produced it, and `backward` refuses to run on such a tape.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{invalid, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    /// Some parameter leaf is upstream of this node.
    tracked: bool,
}

/// Append-only record of evaluated primitives.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<String>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("fault", &self.fault.borrow())
            .finish()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct DualTensor<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl fmt::Debug for DualTensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualTensor")
            .field("id", &self.id)
            .field("shape", &(self.rows, self.cols))
            .field("values", &&*self.values())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` for constants, intermediates,
    /// and parameters the loss does not depend on.
    pub fn get(&self, leaf: DualTensor<'_>) -> Option<&[f64]> {
        self.grads.get(leaf.id).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zeros when the loss ignores the leaf.
    pub fn get_or_zero(&self, leaf: DualTensor<'_>) -> Vec<f64> {
        self.get(leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.len()])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)`, switching to `x + log(1 + e⁻ˣ)` for positive `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Description of the first non-finite value produced on this tape.
    pub fn fault(&self) -> Option<String> {
        self.fault.borrow().clone()
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> DualTensor<'_> {
        debug_assert_eq!(rows * cols, value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(format!("non-finite value produced by `{}` at node {id}", op.name()));
            }
        }
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
            tracked,
        });
        DualTensor {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// A leaf that receives a gradient.
    pub fn parameter(&self, rows: usize, cols: usize, values: Vec<f64>) -> DualTensor<'_> {
        assert_eq!(rows * cols, values.len(), "parameter shape does not match data");
        self.push(rows, cols, values, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> DualTensor<'_> {
        assert_eq!(rows * cols, values.len(), "constant shape does not match data");
        self.push(rows, cols, values, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> DualTensor<'_> {
        self.constant(1, 1, vec![value])
    }

    /// A `1 x n` constant row.
    pub fn row(&self, values: Vec<f64>) -> DualTensor<'_> {
        let n = values.len();
        self.constant(1, n, values)
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat(&self, parts: &[DualTensor<'_>]) -> Result<DualTensor<'_>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return invalid("concat operands must have equal row counts");
        }
        for p in parts {
            self.check_same(p);
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let mut value = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    value.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
                }
            }
            (value, parts.iter().any(|p| nodes[p.id].tracked))
        };
        Ok(self.push(
            rows,
            cols,
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            tracked,
        ))
    }

    fn check_same(&self, t: &DualTensor<'_>) {
        assert!(std::ptr::eq(self, t.tape), "tensors from different tapes");
    }

    /// Reverse pass from a scalar loss. Nodes are visited once each, in
    /// reverse recording order, so the accumulation order is fixed.
    pub fn backward(&self, loss: DualTensor<'_>) -> Result<Gradients> {
        self.check_same(&loss);
        if loss.len() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", loss.shape()));
        }
        if let Some(fault) = self.fault() {
            return Err(Error::Numerical(fault));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.id].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        // Only parameter leaves keep their gradients.
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !(node.tracked && matches!(node.op, Op::Leaf)) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    contrib(slot);
}

/// Adds `g` into a parent that may have been broadcast from a scalar.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    g: &[f64],
    mut scale: impl FnMut(usize) -> f64,
) {
    let scalar = nodes[id].value.len() == 1 && g.len() != 1;
    accumulate(grads, nodes, id, |slot| {
        if scalar {
            slot[0] += g.iter().enumerate().map(|(i, gi)| gi * scale(i)).sum::<f64>();
        } else {
            for (i, (s, gi)) in slot.iter_mut().zip(g).enumerate() {
                *s += gi * scale(i);
            }
        }
    });
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_broadcast(grads, nodes, a, g, |_| 1.0);
            accumulate_broadcast(grads, nodes, b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            accumulate_broadcast(grads, nodes, a, g, |_| 1.0);
            accumulate_broadcast(grads, nodes, b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            accumulate_broadcast(grads, nodes, a, g, |i| at(vb, i));
            accumulate_broadcast(grads, nodes, b, g, |i| at(va, i));
        }
        Op::Div(a, b) => {
            let vb = &nodes[b].value;
            accumulate_broadcast(grads, nodes, a, g, |i| 1.0 / at(vb, i));
            // d(a/b)/db = -(a/b)/b
            accumulate_broadcast(grads, nodes, b, g, |i| -y[i] / at(vb, i));
        }
        Op::Neg(a) => accumulate(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi)),
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let (r, k, c) = (na.rows, na.cols, nb.cols);
            accumulate(grads, nodes, a, |s| {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let brow = &nb.value[p * c..(p + 1) * c];
                        s[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, b, |s| {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let av = na.value[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (sj, gj) in s[p * c..(p + 1) * c].iter_mut().zip(gi) {
                            *sj += av * gj;
                        }
                    }
                }
            });
        }
        Op::Exp(a) => unary(grads, nodes, a, g, |i, _| y[i]),
        Op::Log(a) => unary(grads, nodes, a, g, |_, x| 1.0 / x),
        Op::Tanh(a) => unary(grads, nodes, a, g, |i, _| 1.0 - y[i] * y[i]),
        Op::Sigmoid(a) => unary(grads, nodes, a, g, |i, _| y[i] * (1.0 - y[i])),
        Op::Softplus(a) => unary(grads, nodes, a, g, |_, x| sigmoid(x)),
        Op::Square(a) => unary(grads, nodes, a, g, |_, x| 2.0 * x),
        Op::Sum(a) => accumulate(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            accumulate(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::Concat(ref parts) => {
            let cols = node.cols;
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                accumulate(grads, nodes, p, |s| {
                    for r in 0..node.rows {
                        for c in 0..pc {
                            s[r * pc + c] += g[r * cols + offset + c];
                        }
                    }
                });
                offset += pc;
            }
        }
        Op::Slice { src, start } => {
            let (sc, len) = (nodes[src].cols, node.cols);
            accumulate(grads, nodes, src, |s| {
                for r in 0..node.rows {
                    for c in 0..len {
                        s[r * sc + start + c] += g[r * len + c];
                    }
                }
            });
        }
    }
}

fn unary(grads: &mut [Option<Vec<f64>>], nodes: &[Node], a: usize, g: &[f64], d: impl Fn(usize, f64) -> f64) {
    let x = &nodes[a].value;
    accumulate(grads, nodes, a, |s| {
        for (i, (s, gi)) in s.iter_mut().zip(g).enumerate() {
            *s += gi * d(i, x[i]);
        }
    });
}

impl<'t> DualTensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow of the forward values (row-major).
    pub fn values(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.values()[0]
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> DualTensor<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().map(|&x| f(x)).collect(), n.tracked)
        };
        self.tape.push(self.rows, self.cols, value, op(self.id), tracked)
    }

    fn binary(
        self,
        other: DualTensor<'t>,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DualTensor<'t>> {
        self.tape.check_same(&other);
        let (rows, cols) = if self.shape() == other.shape() || other.len() == 1 {
            self.shape()
        } else if self.len() == 1 {
            other.shape()
        } else {
            return invalid(format!(
                "shape mismatch in `{}`: {:?} vs {:?}",
                op(0, 0).name(),
                self.shape(),
                other.shape()
            ));
        };
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let value = (0..rows * cols).map(|i| f(at(&a.value, i), at(&b.value, i))).collect();
            (value, a.tracked || b.tracked)
        };
        Ok(self.tape.push(rows, cols, value, op(self.id, other.id), tracked))
    }

    pub fn try_add(self, other: DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn try_sub(self, other: DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn try_mul(self, other: DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn try_div(self, other: DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    /// Matrix product `(r x k) · (k x c)`.
    pub fn matmul(self, other: DualTensor<'t>) -> Result<DualTensor<'t>> {
        self.tape.check_same(&other);
        if self.cols != other.rows {
            return invalid(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (r, k, c) = (self.rows, self.cols, other.cols);
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                for p in 0..k {
                    let av = a.value[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (o, bv) in row.iter_mut().zip(&b.value[p * c..(p + 1) * c]) {
                        *o += av * bv;
                    }
                }
            }
            (out, a.tracked || b.tracked)
        };
        Ok(self.tape.push(r, c, value, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn exp(self) -> DualTensor<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(self) -> DualTensor<'t> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn tanh(self) -> DualTensor<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> DualTensor<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(self) -> DualTensor<'t> {
        self.unary(Op::Softplus, softplus)
    }

    pub fn square(self) -> DualTensor<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(self) -> DualTensor<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>(), n.tracked)
        };
        self.tape.push(1, 1, vec![value], Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> DualTensor<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>() / n.value.len() as f64, n.tracked)
        };
        self.tape.push(1, 1, vec![value], Op::Mean(self.id), tracked)
    }

    /// Columns `start..start + len` of every row.
    pub fn slice(self, start: usize, len: usize) -> Result<DualTensor<'t>> {
        if start + len > self.cols || len == 0 {
            return invalid(format!("slice {start}..{} out of {} columns", start + len, self.cols));
        }
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut v = Vec::with_capacity(self.rows * len);
            for r in 0..self.rows {
                v.extend_from_slice(&n.value[r * self.cols + start..r * self.cols + start + len]);
            }
            (v, n.tracked)
        };
        Ok(self
            .tape
            .push(self.rows, len, value, Op::Slice { src: self.id, start }, tracked))
    }
}

impl<'t> Add for DualTensor<'t> {
    type Output = DualTensor<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        self.try_add(rhs).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> Sub for DualTensor<'t> {
    type Output = DualTensor<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.try_sub(rhs).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> Mul for DualTensor<'t> {
    type Output = DualTensor<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.try_mul(rhs).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> Div for DualTensor<'t> {
    type Output = DualTensor<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        self.try_div(rhs).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> Neg for DualTensor<'t> {
    type Output = DualTensor<'t>;
    fn neg(self) -> Self::Output {
        self.unary(Op::Neg, |x| -x)
    }
}

macro_rules! scalar_rhs {
    ($tr:ident, $method:ident) => {
        impl<'t> $tr<f64> for DualTensor<'t> {
            type Output = DualTensor<'t>;
            fn $method(self, rhs: f64) -> Self::Output {
                let c = self.tape.scalar(rhs);
                $tr::$method(self, c)
            }
        }

        impl<'t> $tr<DualTensor<'t>> for f64 {
            type Output = DualTensor<'t>;
            fn $method(self, rhs: DualTensor<'t>) -> Self::Output {
                let c = rhs.tape.scalar(self);
                $tr::$method(c, rhs)
            }
        }
    };
}

scalar_rhs!(Add, add);
scalar_rhs!(Sub, sub);
scalar_rhs!(Mul, mul);
scalar_rhs!(Div, div);

/// Summed Gaussian log density `−½ log(2π v) − (x − μ)² / (2v)` over all
/// elements. Each argument may be a scalar or match the others' shape.
pub fn gaussian_log_pdf<'t>(x: DualTensor<'t>, mean: DualTensor<'t>, var: DualTensor<'t>) -> Result<DualTensor<'t>> {
    if let Some(v) = var.values().iter().find(|v| !(**v > 0.0)) {
        return invalid(format!("gaussian_log_pdf needs positive variance, got {v}"));
    }
    let resid = x.try_sub(mean)?;
    let term = var.log().try_add(resid.square().try_div(var)?)?;
    let n = term.len() as f64;
    Ok(term.sum() * -0.5 - 0.5 * n * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.parameter(1, 1, vec![3.0]);
        let g = tape.backward(x.square()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.parameter(1, 1, vec![0.0]);
        let y = x.softplus();
        assert!((y.item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[0.5]);
        let big = tape.constant(1, 1, vec![50.0]).softplus().item();
        assert!((big - 50.0).abs() < 1e-15 && big.is_finite());
        assert!(tape.constant(1, 1, vec![800.0]).softplus().item().is_finite());
        assert!(tape.fault().is_none());
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let tape = Tape::new();
        let p = tape.parameter(2, 3, vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0]);
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(1, 2, vec![1.0, 2.0]);
        let b = tape.constant(1, 3, vec![1.0, 2.0, 3.0]);
        assert!(matches!(a.try_add(b), Err(Error::InvalidArgument(_))));
        assert!(a.matmul(b).is_err());
        assert!(a.slice(1, 2).is_err());
        assert!(tape.backward(a).is_err());
        let c = tape.constant(2, 1, vec![1.0, 2.0]);
        assert!(tape.concat(&[a, c]).is_err());
    }

    #[test]
    fn non_finite_values_are_reported() {
        let tape = Tape::new();
        let x = tape.parameter(1, 1, vec![-1.0]);
        let y = x.log();
        assert!(tape.fault().unwrap().contains("log"));
        assert!(matches!(tape.backward(y), Err(Error::Numerical(_))));
    }

    #[test]
    fn gaussian_log_pdf_cases() {
        let tape = Tape::new();
        let x = tape.constant(1, 3, vec![0.5, 0.5, 0.5]);
        let lp = gaussian_log_pdf(x, x, tape.scalar(1.0)).unwrap();
        assert!((lp.item() - 3.0 * -0.918_938_533_204_672_7).abs() < 1e-12);

        let mean = tape.parameter(1, 1, vec![0.0]);
        let lp = gaussian_log_pdf(tape.scalar(1.0), mean, tape.scalar(2.0)).unwrap();
        assert!((tape.backward(lp).unwrap().get(mean).unwrap()[0] - 0.5).abs() < 1e-15);

        assert!(gaussian_log_pdf(x, x, tape.scalar(0.0)).is_err());
        assert!(gaussian_log_pdf(x, x, tape.scalar(-1.0)).is_err());
    }

    #[test]
    fn gaussian_log_pdf_matches_finite_differences() {
        let xs: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let ms: Vec<f64> = (0..10).map(|i| (i as f64 * 0.91).cos() * 0.5).collect();
        let vs: Vec<f64> = (0..10).map(|i| 0.3 + (i as f64 * 0.13).sin().abs()).collect();
        let packed: Vec<f64> = xs.iter().chain(&ms).chain(&vs).copied().collect();
        let eval = |p: &[f64]| {
            let t = Tape::new();
            let lp = gaussian_log_pdf(
                t.row(p[..10].to_vec()),
                t.row(p[10..20].to_vec()),
                t.row(p[20..].to_vec()),
            )
            .unwrap();
            lp.item()
        };
        let tape = Tape::new();
        let x = tape.parameter(1, 10, xs.clone());
        let m = tape.parameter(1, 10, ms.clone());
        let v = tape.parameter(1, 10, vs.clone());
        let g = tape.backward(gaussian_log_pdf(x, m, v).unwrap()).unwrap();
        let analytic: Vec<f64> = [x, m, v].iter().flat_map(|t| g.get(*t).unwrap().to_vec()).collect();
        let fd = finite_diff(eval, &packed, 1e-5);
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn matmul_tanh_chain_matches_finite_differences() {
        let a0: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect();
        let b0: Vec<f64> = (0..16).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
        let f = |a: &[f64], b: &[f64]| {
            let t = Tape::new();
            let a = t.constant(4, 4, a.to_vec());
            let b = t.constant(4, 4, b.to_vec());
            a.matmul(b).unwrap().tanh().matmul(a).unwrap().sum().item()
        };
        let tape = Tape::new();
        let a = tape.parameter(4, 4, a0.clone());
        let b = tape.parameter(4, 4, b0.clone());
        let loss = a.matmul(b).unwrap().tanh().matmul(a).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let fa = finite_diff(|x| f(x, &b0), &a0, 1e-5);
        let fb = finite_diff(|x| f(&a0, x), &b0, 1e-5);
        for (an, fd) in g
            .get(a)
            .unwrap()
            .iter()
            .zip(&fa)
            .chain(g.get(b).unwrap().iter().zip(&fb))
        {
            assert!(
                (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-3),
                "{an} vs {fd}"
            );
        }
    }

    #[test]
    fn backward_is_linear() {
        let p0 = vec![0.3, -0.7, 1.1];
        let grad = |wa: f64, wb: f64| {
            let t = Tape::new();
            let p = t.parameter(1, 3, p0.clone());
            let f = p.exp().sum();
            let g = (p.square() * p).sum();
            let loss = f * wa + g * wb;
            t.backward(loss).unwrap().get(p).unwrap().to_vec()
        };
        let (gf, gg, combo) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.5, -1.5));
        for i in 0..3 {
            assert!((combo[i] - (2.5 * gf[i] - 1.5 * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rebuilt_tapes_agree_bitwise() {
        let run = || {
            let t = Tape::new();
            let w = t.parameter(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
            let x = t.row(vec![1.0, -2.0, 0.5]);
            let h = x.matmul(w).unwrap().sigmoid();
            let loss = tape_concat_sum(&t, h, x);
            t.backward(loss).unwrap().get(w).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    fn tape_concat_sum<'t>(t: &'t Tape, a: DualTensor<'t>, b: DualTensor<'t>) -> DualTensor<'t> {
        let c = t.concat(&[a, b]).unwrap();
        (c.slice(1, 3).unwrap().softplus() / 2.0).mean()
    }

    #[test]
    fn concat_slice_and_broadcast_gradients() {
        let tape = Tape::new();
        let a = tape.parameter(1, 2, vec![1.0, 2.0]);
        let s = tape.parameter(1, 1, vec![3.0]);
        let c = tape.concat(&[a, s]).unwrap();
        let loss = (c.slice(1, 2).unwrap() * s).sum() + (a / s).sum() - (-a).mean();
        let g = tape.backward(loss).unwrap();
        // loss = 3a₂ + s² + (a₁+a₂)/s + (a₁+a₂)/2
        let ga = g.get(a).unwrap();
        assert!((ga[0] - (1.0 / 3.0 + 0.5)).abs() < 1e-14);
        assert!((ga[1] - (3.0 + 1.0 / 3.0 + 0.5)).abs() < 1e-14);
        let gs = g.get(s).unwrap()[0];
        assert!((gs - (2.0 + 6.0 - 3.0 / 9.0)).abs() < 1e-14);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let p = tape.parameter(1, 1, vec![2.0]);
        let c = tape.constant(1, 1, vec![5.0]);
        let g = tape.backward(p * c).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[5.0]);
        let unused = tape.parameter(1, 2, vec![0.0, 0.0]);
        assert_eq!(g.get_or_zero(unused), vec![0.0, 0.0]);
    }
}
