//! Tape-based reverse-mode automatic differentiation with higher-order support.
//!
//! Every operation is appended to a [`Tape`] as a [`Var`]. Calling
//! [`Tape::grad`] walks the tape backwards and *records* the adjoint
//! computation with the same primitives, so the returned gradients are
//! themselves variables that can be differentiated again. This is what makes
//! losses containing input-gradients trainable (double backprop).
//!
//! ```
//! use paglab::autodiff::Tape;
//! use paglab::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf("x", Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let dy = tape.grad(y, &[x], true).unwrap()[0];
//! assert_eq!(tape.scalar(dy).unwrap(), 6.0);
//! let d2y = tape.grad(dy, &[x], false).unwrap()[0];
//! assert_eq!(tape.scalar(d2y).unwrap(), 2.0);
//! ```
//!
//! ReLU and max-with-constant use a zero subgradient at the kink, and their
//! second derivative is identically zero.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadOperand {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("tensor of shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("gradient output must be scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable #{0} does not belong to this tape")]
    ForeignVar(usize),
    #[error("variable #{0} is not a leaf of the tape")]
    NotALeaf(usize),
    #[error("leaf `{0}` is already registered")]
    DuplicateLeaf(String),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("no leaf named `{0}` on this tape")]
    UnknownLeaf(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Primitive operations recorded on a tape. Operands are node indices.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    Scale(usize, f64),
    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    /// Elementwise `max(a, c)`.
    MaxConst(usize, f64),
    /// `upstream` where `input > threshold`, else 0. Backward rule of ReLU and
    /// max-with-constant; constant with respect to `input`.
    Gate {
        input: usize,
        upstream: usize,
        threshold: f64,
    },
    Sum(usize),
    /// Broadcast a scalar to the node's shape.
    Expand(usize),
    Dot(usize, usize),
    /// Euclidean norm of all entries.
    Norm(usize),
    /// Elementwise reciprocal, with `1/0` defined as 0.
    Recip(usize),
    Exp(usize),
    LogSumExp(usize),
    /// Select one entry of a rank-1 tensor as a scalar.
    Index(usize, usize),
    /// Place a scalar at a position of a zero rank-1 tensor.
    Scatter(usize, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::MaxConst(..) => "max-const",
            Op::Gate { .. } => "gate",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::Dot(..) => "dot",
            Op::Norm(..) => "norm",
            Op::Recip(..) => "recip",
            Op::Exp(..) => "exp",
            Op::LogSumExp(..) => "log-sum-exp",
            Op::Index(..) => "index",
            Op::Scatter(..) => "scatter",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => [Some(a), Some(b)],
            Op::Gate {
                input, upstream, ..
            } => [Some(input), Some(upstream)],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::MaxConst(a, _)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Norm(a)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::LogSumExp(a)
            | Op::Index(a, _)
            | Op::Scatter(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// An append-only computation graph.
///
/// Nodes are stored in creation order, which is always a valid topological
/// order. Named leaves can be rebound and the whole graph replayed with
/// [`Tape::forward`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    names: RefCell<Vec<(String, usize)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a named, differentiable leaf.
    pub fn leaf(&self, name: &str, value: Tensor) -> Result<Var, GradError> {
        if self.names.borrow().iter().any(|(n, _)| n == name) {
            return Err(GradError::DuplicateLeaf(name.to_string()));
        }
        let var = self.push(Op::Leaf, value, true);
        self.names.borrow_mut().push((name.to_string(), var.index));
        Ok(var)
    }

    /// An anonymous leaf that never requires gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.names
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, index)| Var { tape: self.id, index })
    }

    pub fn value(&self, var: Var) -> Result<Tensor, GradError> {
        self.check(var)?;
        Ok(self.nodes.borrow()[var.index].value.clone())
    }

    /// Value of a one-element node.
    pub fn scalar(&self, var: Var) -> Result<f64, GradError> {
        self.check(var)?;
        let nodes = self.nodes.borrow();
        let value = &nodes[var.index].value;
        value
            .item()
            .ok_or_else(|| GradError::NonScalarOutput(value.shape().to_vec()))
    }

    pub fn shape(&self, var: Var) -> Result<Vec<usize>, GradError> {
        self.check(var)?;
        Ok(self.nodes.borrow()[var.index].value.shape().to_vec())
    }

    pub fn op(&self, var: Var) -> Result<Op, GradError> {
        self.check(var)?;
        Ok(self.nodes.borrow()[var.index].op.clone())
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool, GradError> {
        self.check(var)?;
        Ok(self.nodes.borrow()[var.index].requires_grad)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.record(Op::Add(self.idx(a)?, self.idx(b)?))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, GradError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.record(Op::Mul(self.idx(a)?, self.idx(b)?))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, GradError> {
        self.record(Op::Scale(self.idx(a)?, c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.record(Op::MatMul(self.idx(a)?, self.idx(b)?))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Transpose(self.idx(a)?))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia].value;
            let n: usize = shape.iter().product();
            if n != src.numel() || shape.contains(&0) {
                return Err(GradError::ShapeMismatch {
                    op: "reshape",
                    lhs: src.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::from_parts(shape.to_vec(), src.data().to_vec())
        };
        Ok(self.push_derived(Op::Reshape(ia), value))
    }

    pub fn relu(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Relu(self.idx(a)?))
    }

    pub fn max_const(&self, a: Var, c: f64) -> Result<Var, GradError> {
        self.record(Op::MaxConst(self.idx(a)?, c))
    }

    pub fn gate(&self, input: Var, upstream: Var, threshold: f64) -> Result<Var, GradError> {
        self.record(Op::Gate {
            input: self.idx(input)?,
            upstream: self.idx(upstream)?,
            threshold,
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Sum(self.idx(a)?))
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia].value;
            if src.numel() != 1 || shape.contains(&0) {
                return Err(GradError::BadOperand {
                    op: "expand",
                    shape: src.shape().to_vec(),
                });
            }
            Tensor::filled(shape, src.data()[0])
        };
        Ok(self.push_derived(Op::Expand(ia), value))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var, GradError> {
        self.record(Op::Dot(self.idx(a)?, self.idx(b)?))
    }

    pub fn norm(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Norm(self.idx(a)?))
    }

    pub fn recip(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Recip(self.idx(a)?))
    }

    pub fn exp(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::Exp(self.idx(a)?))
    }

    pub fn log_sum_exp(&self, a: Var) -> Result<Var, GradError> {
        self.record(Op::LogSumExp(self.idx(a)?))
    }

    pub fn index(&self, a: Var, i: usize) -> Result<Var, GradError> {
        self.record(Op::Index(self.idx(a)?, i))
    }

    /// A rank-1 tensor of length `len` holding scalar `a` at position `i`.
    pub fn scatter(&self, a: Var, i: usize, len: usize) -> Result<Var, GradError> {
        let ia = self.idx(a)?;
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia].value;
            if src.numel() != 1 {
                return Err(GradError::BadOperand {
                    op: "scatter",
                    shape: src.shape().to_vec(),
                });
            }
            if i >= len {
                return Err(GradError::IndexOutOfRange { index: i, len });
            }
            let mut data = vec![0.0; len];
            data[i] = src.data()[0];
            Tensor::from_parts(vec![len], data)
        };
        Ok(self.push_derived(Op::Scatter(ia, i), value))
    }

    /// Gradients of the scalar `output` with respect to each leaf in `wrt`.
    ///
    /// The adjoint computation is recorded on this tape. With `create_graph`
    /// the returned variables stay on the tape and can be differentiated
    /// again; without it their values are materialized as constants and the
    /// intermediate adjoint nodes are discarded.
    pub fn grad(&self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, GradError> {
        let mark = self.len();
        let grads = self.record_grad(output, wrt)?;
        if create_graph {
            return Ok(grads);
        }
        let values: Vec<Tensor> = {
            let nodes = self.nodes.borrow();
            grads.iter().map(|g| nodes[g.index].value.clone()).collect()
        };
        self.nodes.borrow_mut().truncate(mark);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// First-order gradients as plain tensors; leaves the tape unchanged.
    pub fn grad_values(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, GradError> {
        let mark = self.len();
        let grads = self.record_grad(output, wrt)?;
        let values = {
            let nodes = self.nodes.borrow();
            grads.iter().map(|g| nodes[g.index].value.clone()).collect()
        };
        self.nodes.borrow_mut().truncate(mark);
        Ok(values)
    }

    /// Rebinds every named leaf and recomputes all other nodes in tape order.
    ///
    /// Returns the value of the last node on the tape.
    pub fn forward(&self, leaves: &HashMap<String, Tensor>) -> Result<Tensor, GradError> {
        let names = self.names.borrow().clone();
        for key in leaves.keys() {
            if !names.iter().any(|(n, _)| n == key) {
                return Err(GradError::UnknownLeaf(key.clone()));
            }
        }
        {
            let mut nodes = self.nodes.borrow_mut();
            for (name, index) in &names {
                let value = leaves
                    .get(name)
                    .ok_or_else(|| GradError::UnboundLeaf(name.clone()))?;
                let slot = &mut nodes[*index].value;
                if slot.shape() != value.shape() {
                    return Err(GradError::ShapeMismatch {
                        op: "leaf",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value.clone();
            }
        }
        let len = self.len();
        for i in 0..len {
            let op = self.nodes.borrow()[i].op.clone();
            let value = match op {
                Op::Leaf => continue,
                Op::Reshape(a) => {
                    let nodes = self.nodes.borrow();
                    Tensor::from_parts(nodes[i].value.shape().to_vec(), nodes[a].value.data().to_vec())
                }
                Op::Expand(a) => {
                    let nodes = self.nodes.borrow();
                    Tensor::filled(nodes[i].value.shape(), nodes[a].value.data()[0])
                }
                Op::Scatter(a, k) => {
                    let nodes = self.nodes.borrow();
                    let mut data = vec![0.0; nodes[i].value.numel()];
                    data[k] = nodes[a].value.data()[0];
                    Tensor::from_parts(vec![data.len()], data)
                }
                ref op => evaluate(op, &self.nodes.borrow())?,
            };
            self.nodes.borrow_mut()[i].value = value;
        }
        let nodes = self.nodes.borrow();
        nodes
            .last()
            .map(|n| n.value.clone())
            .ok_or(GradError::InvalidShape(Vec::new()))
    }

    fn record_grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, GradError> {
        let out = self.idx(output)?;
        let targets: Vec<usize> = wrt.iter().map(|w| self.idx(*w)).collect::<Result<_, _>>()?;
        {
            let nodes = self.nodes.borrow();
            if nodes[out].value.numel() != 1 {
                return Err(GradError::NonScalarOutput(nodes[out].value.shape().to_vec()));
            }
            if let Some(&t) = targets.iter().find(|&&t| nodes[t].op != Op::Leaf) {
                return Err(GradError::NotALeaf(t));
            }
        }

        // Nodes that depend on at least one target leaf.
        let mut reach = vec![false; out + 1];
        {
            let nodes = self.nodes.borrow();
            for &t in &targets {
                if t <= out {
                    reach[t] = true;
                }
            }
            for i in 0..=out {
                if reach[i] {
                    continue;
                }
                reach[i] = nodes[i].op.inputs().iter().flatten().any(|&j| reach[j]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; out + 1];
        let out_shape = self.nodes.borrow()[out].value.shape().to_vec();
        adjoint[out] = Some(self.constant(Tensor::filled(&out_shape, 1.0)));

        for i in (0..=out).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            self.backward_rule(i, &op, g, &reach, &mut adjoint)?;
        }

        targets
            .iter()
            .map(|&t| match adjoint.get(t).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes.borrow()[t].value.shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn backward_rule(
        &self,
        node: usize,
        op: &Op,
        g: Var,
        reach: &[bool],
        adjoint: &mut [Option<Var>],
    ) -> Result<(), GradError> {
        let this = self.var(node);
        let shape_of = |i: usize| self.nodes.borrow()[i].value.shape().to_vec();
        let mut contribute = |target: usize, contribution: Var| -> Result<(), GradError> {
            adjoint[target] = Some(match adjoint[target] {
                Some(prev) => self.add(prev, contribution)?,
                None => contribution,
            });
            Ok(())
        };

        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if reach[a] {
                    contribute(a, g)?;
                }
                if reach[b] {
                    contribute(b, g)?;
                }
            }
            Op::Mul(a, b) => {
                if reach[a] {
                    contribute(a, self.mul(g, self.var(b))?)?;
                }
                if reach[b] {
                    contribute(b, self.mul(g, self.var(a))?)?;
                }
            }
            Op::Scale(a, c) => contribute(a, self.scale(g, c)?)?,
            Op::MatMul(a, b) => {
                let (va, vb) = (self.var(a), self.var(b));
                let shape_b = shape_of(b);
                if reach[a] {
                    let ga = if shape_b.len() == 1 {
                        let m = shape_of(a)[0];
                        let col = self.reshape(g, &[m, 1])?;
                        let row = self.reshape(vb, &[1, shape_b[0]])?;
                        self.matmul(col, row)?
                    } else {
                        self.matmul(g, self.transpose(vb)?)?
                    };
                    contribute(a, ga)?;
                }
                if reach[b] {
                    contribute(b, self.matmul(self.transpose(va)?, g)?)?;
                }
            }
            Op::Transpose(a) => contribute(a, self.transpose(g)?)?,
            Op::Reshape(a) => contribute(a, self.reshape(g, &shape_of(a))?)?,
            Op::Relu(a) => contribute(a, self.gate(self.var(a), g, 0.0)?)?,
            Op::MaxConst(a, c) => contribute(a, self.gate(self.var(a), g, c)?)?,
            Op::Gate {
                input,
                upstream,
                threshold,
            } => {
                if reach[upstream] {
                    contribute(upstream, self.gate(self.var(input), g, threshold)?)?;
                }
            }
            Op::Sum(a) => contribute(a, self.expand(g, &shape_of(a))?)?,
            Op::Expand(a) => contribute(a, self.sum(g)?)?,
            Op::Dot(a, b) => {
                let shape = shape_of(a);
                let ge = self.expand(g, &shape)?;
                if reach[a] {
                    contribute(a, self.mul(ge, self.var(b))?)?;
                }
                if reach[b] {
                    contribute(b, self.mul(ge, self.var(a))?)?;
                }
            }
            Op::Norm(a) => {
                let scaled = self.mul(g, self.recip(this)?)?;
                let ge = self.expand(scaled, &shape_of(a))?;
                contribute(a, self.mul(ge, self.var(a))?)?;
            }
            Op::Recip(a) => {
                let sq = self.mul(this, this)?;
                contribute(a, self.mul(g, self.scale(sq, -1.0)?)?)?;
            }
            Op::Exp(a) => contribute(a, self.mul(g, this)?)?,
            Op::LogSumExp(a) => {
                let shape = shape_of(a);
                let shift = self.expand(self.scale(this, -1.0)?, &shape)?;
                let softmax = self.exp(self.add(self.var(a), shift)?)?;
                contribute(a, self.mul(self.expand(g, &shape)?, softmax)?)?;
            }
            Op::Index(a, k) => {
                let len = shape_of(a)[0];
                contribute(a, self.scatter(g, k, len)?)?;
            }
            Op::Scatter(a, k) => contribute(a, self.index(g, k)?)?,
        }
        Ok(())
    }

    fn record(&self, op: Op) -> Result<Var, GradError> {
        let value = evaluate(&op, &self.nodes.borrow())?;
        Ok(self.push_derived(op, value))
    }

    fn push_derived(&self, op: Op, value: Tensor) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().flatten().any(|&i| nodes[i].requires_grad)
        };
        self.push(op, value, requires_grad)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    fn check(&self, var: Var) -> Result<(), GradError> {
        if var.tape != self.id || var.index >= self.len() {
            return Err(GradError::ForeignVar(var.index));
        }
        Ok(())
    }

    fn idx(&self, var: Var) -> Result<usize, GradError> {
        self.check(var)?;
        Ok(var.index)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Forward value of an op whose output shape follows from its operands.
fn evaluate(op: &Op, nodes: &[Node]) -> Result<Tensor, GradError> {
    let val = |i: usize| &nodes[i].value;
    Ok(match *op {
        Op::Leaf | Op::Reshape(_) | Op::Expand(_) | Op::Scatter(..) => {
            unreachable!("{} is evaluated by its constructor", op.name())
        }
        Op::Add(a, b) => {
            same_shape("add", val(a), val(b))?;
            zip_with(val(a), val(b), |x, y| x + y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", val(a), val(b))?;
            zip_with(val(a), val(b), |x, y| x * y)
        }
        Op::Scale(a, c) => val(a).map(|x| x * c),
        Op::MatMul(a, b) => matmul(val(a), val(b))?,
        Op::Transpose(a) => {
            let t = val(a);
            if t.rank() != 2 {
                return Err(GradError::BadOperand {
                    op: "transpose",
                    shape: t.shape().to_vec(),
                });
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let src = t.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        }
        Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::MaxConst(a, c) => val(a).map(|x| if x > c { x } else { c }),
        Op::Gate {
            input,
            upstream,
            threshold,
        } => {
            same_shape("gate", val(input), val(upstream))?;
            zip_with(val(input), val(upstream), |x, u| if x > threshold { u } else { 0.0 })
        }
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::Dot(a, b) => {
            same_shape("dot", val(a), val(b))?;
            Tensor::scalar(val(a).data().iter().zip(val(b).data()).map(|(x, y)| x * y).sum())
        }
        Op::Norm(a) => Tensor::scalar(val(a).data().iter().map(|x| x * x).sum::<f64>().sqrt()),
        Op::Recip(a) => val(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x }),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::LogSumExp(a) => Tensor::scalar(log_sum_exp(val(a).data())),
        Op::Index(a, k) => {
            let t = val(a);
            if t.rank() != 1 {
                return Err(GradError::BadOperand {
                    op: "index",
                    shape: t.shape().to_vec(),
                });
            }
            if k >= t.numel() {
                return Err(GradError::IndexOutOfRange {
                    index: k,
                    len: t.numel(),
                });
            }
            Tensor::scalar(t.data()[k])
        }
    })
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, GradError> {
    let mismatch = || GradError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != 2 || !(b.rank() == 1 || b.rank() == 2) {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    if b.shape()[0] != k {
        return Err(mismatch());
    }
    let n = if b.rank() == 2 { b.shape()[1] } else { 1 };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &ad[i * k..(i + 1) * k];
        for (p, &aip) in row.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bpj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    let shape = if b.rank() == 2 { vec![m, n] } else { vec![m] };
    Ok(Tensor::from_parts(shape, out))
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
