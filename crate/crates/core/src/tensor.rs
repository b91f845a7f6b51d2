//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every operation as a node holding its value, its
//! parents and the rule that maps an output gradient back onto the parents.
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//!
//! Layers with fused kernels (convolution, pooling, batch norm, the sinc
//! filterbank, cross-entropy) live in other modules and plug in through
//! [`BackwardRule`] and [`Graph::push_op`].

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use crate::error::{Error, Result};

/// Scalar type used for every value and gradient.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn vector(data: Vec<Real>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from equal-length rows. Panics on ragged input.
    pub fn matrix(rows: &[Vec<Real>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(cols > 0 && rows.iter().all(|r| r.len() == cols));
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = self.shape[..] else {
            return Err(Error::Shape(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad_output: &'a Tensor,
    /// `needs_grad[i]` is false when input `i` has no trainable ancestor, in
    /// which case the rule may return `None` for it and skip the work.
    pub needs_grad: Vec<bool>,
}

/// Local derivative of one recorded operation.
pub trait BackwardRule {
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;

    /// Feed the branch each element took through a piecewise definition
    /// (ReLU side, pooling winner, active clamp) into `h`. Smooth ops leave
    /// this empty.
    fn branches(&self, _inputs: &[&Tensor], _h: &mut dyn Hasher) {}
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<Var>,
    rule: Option<Box<dyn BackwardRule>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Graph::backward`] accumulates into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation whose value has already been computed.
    pub fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        rule: impl BackwardRule + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            parents: parents.to_vec(),
            rule: Some(Box::new(rule)),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Hash of every branch taken by piecewise ops in the graph. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                rule.branches(&inputs, &mut h);
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a one-element `loss`. Gradients of trainable
    /// leaves are added to whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor>> = Vec::new();
        local.resize_with(loss.0 + 1, || None);
        local[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = local[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                if node.requires_grad {
                    local[i] = Some(grad_out);
                }
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let ctx = BackwardCtx {
                inputs: node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect(),
                output: &node.value,
                grad_output: &grad_out,
                needs_grad: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let grads = rule.backward(&ctx)?;
            debug_assert_eq!(grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[parent.0].value.shape());
                match &mut local[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(local) {
            if let (Some(g), None) = (g, node.rule.as_ref()) {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    LeakyRelu(Real),
    Log,
    Exp,
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// `b` matches the trailing axis of `a` and repeats over every leading
    /// position (bias vectors).
    Trailing {
        width: usize,
    },
    /// `a` is `[B, T, F]`, `b` is `[B, F]`, copied along time.
    Time {
        steps: usize,
        width: usize,
    },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self::Same);
        }
        if b.len() == 1 && a.last() == Some(&b[0]) {
            return Ok(Self::Trailing { width: b[0] });
        }
        if a.len() == 3 && b.len() == 2 && a[0] == b[0] && a[2] == b[1] {
            return Ok(Self::Time {
                steps: a[1],
                width: a[2],
            });
        }
        Err(Error::Shape(format!(
            "cannot broadcast {b:?} against {a:?}"
        )))
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Trailing { width } => i % width,
            Self::Time { steps, width } => (i / (steps * width)) * width + i % width,
        }
    }
}

struct BinaryRule {
    op: ElementwiseOp,
    bcast: Broadcast,
}

impl BackwardRule for BinaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b, gy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);
        let mut ga = ctx.needs_grad[0].then(|| vec![0.0; a.len()]);
        let mut gb = ctx.needs_grad[1].then(|| vec![0.0; b.len()]);
        for (i, &g) in gy.data().iter().enumerate() {
            let j = self.bcast.index(i);
            let (x, y) = (a.data[i], b.data[j]);
            let (da, db) = match self.op {
                ElementwiseOp::Add => (g, g),
                ElementwiseOp::Sub => (g, -g),
                ElementwiseOp::Mul => (g * y, g * x),
                ElementwiseOp::Div => (g / y, -g * x / (y * y)),
                _ => unreachable!(),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += db;
            }
        }
        Ok(vec![
            ga.map(|d| Tensor::from_parts(a.shape.clone(), d)),
            gb.map(|d| Tensor::from_parts(b.shape.clone(), d)),
        ])
    }
}

struct UnaryRule {
    op: ElementwiseOp,
}

impl BackwardRule for UnaryRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, y, gy) = (ctx.inputs[0], ctx.output, ctx.grad_output);
        let d: Vec<Real> = (0..x.len())
            .map(|i| {
                let (xi, yi, g) = (x.data[i], y.data[i], gy.data[i]);
                g * match self.op {
                    ElementwiseOp::Sigmoid => yi * (1.0 - yi),
                    ElementwiseOp::Tanh => 1.0 - yi * yi,
                    ElementwiseOp::LeakyRelu(slope) => {
                        if xi > 0.0 {
                            1.0
                        } else {
                            slope
                        }
                    }
                    ElementwiseOp::Log => 1.0 / xi,
                    ElementwiseOp::Exp => yi,
                    _ => unreachable!(),
                }
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(x.shape.clone(), d))])
    }

    fn branches(&self, inputs: &[&Tensor], h: &mut dyn Hasher) {
        if let ElementwiseOp::LeakyRelu(_) = self.op {
            for &x in &inputs[0].data {
                h.write_u8(u8::from(x > 0.0));
            }
        }
    }
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// Apply an elementwise operation. Binary kinds need `b`; unary kinds
    /// reject it.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes one operand"))),
        }
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = Broadcast::resolve(av.shape(), bv.shape())?;
        if op == ElementwiseOp::Div {
            if let Some(pos) = bv.data.iter().position(|&v| v == 0.0) {
                return Err(Error::Domain(format!("division by zero at index {pos}")));
            }
        }
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv.data[bcast.index(i)];
                match op {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Sub => x - y,
                    ElementwiseOp::Mul => x * y,
                    ElementwiseOp::Div => x / y,
                    _ => unreachable!(),
                }
            })
            .collect();
        let value = Tensor::from_parts(av.shape.clone(), data);
        self.push_op(op_name(op), value, &[a, b], BinaryRule { op, bcast })
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Result<Var> {
        let av = self.value(a);
        if op == ElementwiseOp::Log {
            if let Some(pos) = av.data.iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain(format!(
                    "log of non-positive value {} at index {pos}",
                    av.data[pos]
                )));
            }
        }
        let value = av.map(|x| match op {
            ElementwiseOp::Sigmoid => sigmoid(x),
            ElementwiseOp::Tanh => x.tanh(),
            ElementwiseOp::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ElementwiseOp::Log => x.ln(),
            ElementwiseOp::Exp => x.exp(),
            _ => unreachable!(),
        });
        self.push_op(op_name(op), value, &[a], UnaryRule { op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: Real) -> Result<Var> {
        self.unary(ElementwiseOp::LeakyRelu(slope), a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Div => "div",
        ElementwiseOp::Sigmoid => "sigmoid",
        ElementwiseOp::Tanh => "tanh",
        ElementwiseOp::LeakyRelu(_) => "leaky_relu",
        ElementwiseOp::Log => "log",
        ElementwiseOp::Exp => "exp",
    }
}

/// `[m, k] x [k, n] -> [m, n]`, i-k-j order so the inner loop is contiguous.
pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

struct MatMulRule;

impl BackwardRule for MatMulRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b, gc) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_output);
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        // dA = dC . B^T
        let ga = if ctx.needs_grad[0] {
            let bt = b.transpose()?;
            Some(Tensor::from_parts(
                vec![m, k],
                matmul_raw(&gc.data, &bt.data, m, n, k),
            ))
        } else {
            None
        };
        // dB = A^T . dC
        let gb = if ctx.needs_grad[1] {
            let at = a.transpose()?;
            Some(Tensor::from_parts(
                vec![k, n],
                matmul_raw(&at.data, &gc.data, k, m, n),
            ))
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Tensor::from_parts(vec![m, n], matmul_raw(&av.data, &bv.data, m, k, n));
        self.push_op("matmul", value, &[a, b], MatMulRule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    Max,
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_without(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

struct ReduceRule {
    op: ReduceOp,
    axis: usize,
    /// Flat input index of the winner for each output element (max only).
    argmax: Vec<usize>,
}

impl BackwardRule for ReduceRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, gy) = (ctx.inputs[0], ctx.grad_output);
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let mut gx = vec![0.0; x.len()];
        match self.op {
            ReduceOp::Max => {
                for (o, &src) in self.argmax.iter().enumerate() {
                    gx[src] += gy.data[o];
                }
            }
            ReduceOp::Sum | ReduceOp::Mean => {
                let scale = if self.op == ReduceOp::Mean {
                    1.0 / n as Real
                } else {
                    1.0
                };
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = gy.data[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape.clone(), gx))])
    }

    fn branches(&self, _inputs: &[&Tensor], h: &mut dyn Hasher) {
        for &a in &self.argmax {
            h.write_usize(a);
        }
    }
}

impl Graph {
    /// Reduce along `axis`, dropping it. Max routes its gradient to the first
    /// occurrence of the maximum.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                out[o * inner + i] = match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let s: Real = (0..n).map(|j| xv.data[at(j)]).sum();
                        if op == ReduceOp::Mean {
                            s / n as Real
                        } else {
                            s
                        }
                    }
                    ReduceOp::Max => {
                        let mut best = at(0);
                        for j in 1..n {
                            if xv.data[at(j)] > xv.data[best] {
                                best = at(j);
                            }
                        }
                        argmax.push(best);
                        xv.data[best]
                    }
                };
            }
        }
        let value = Tensor::from_parts(shape_without(xv.shape(), axis), out);
        let name = match op {
            ReduceOp::Mean => "mean",
            ReduceOp::Sum => "sum",
            ReduceOp::Max => "max",
        };
        self.push_op(name, value, &[x], ReduceRule { op, axis, argmax })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = Tensor::from_parts(vec![n], self.value(x).data.clone());
        let flat = self.push_op("flatten", flat, &[x], ReshapeRule)?;
        self.reduce(ReduceOp::Sum, flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", value, &[x], ReshapeRule)
    }

    /// Take position `index` along `axis`, dropping the axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || index >= xv.shape()[axis] {
            return Err(Error::Shape(format!(
                "index {index} on axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            out.extend_from_slice(&xv.data[start..start + inner]);
        }
        let value = Tensor::from_parts(shape_without(xv.shape(), axis), out);
        self.push_op("index_axis", value, &[x], IndexAxisRule { axis, index })
    }
}

struct ReshapeRule;

impl BackwardRule for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let shape = ctx.inputs[0].shape.clone();
        Ok(vec![Some(Tensor::from_parts(
            shape,
            ctx.grad_output.data.clone(),
        ))])
    }
}

struct IndexAxisRule {
    axis: usize,
    index: usize,
}

impl BackwardRule for IndexAxisRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let mut gx = vec![0.0; x.len()];
        for o in 0..outer {
            let start = (o * n + self.index) * inner;
            gx[start..start + inner]
                .copy_from_slice(&ctx.grad_output.data[o * inner..(o + 1) * inner]);
        }
        Ok(vec![Some(Tensor::from_parts(x.shape.clone(), gx))])
    }
}
