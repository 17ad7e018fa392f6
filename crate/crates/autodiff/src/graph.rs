//! The expression graph and its forward operations.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its value on the tape, and returns a [`Var`] handle. Inputs always
//! precede their consumers, so tape order is a topological order.

use std::cell::RefCell;
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Index of a node on its graph's tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    /// `[n, m] + [1, m]`
    AddRow,
    /// `[1, m] -> [n, m]`
    BroadcastRows(usize),
    /// `[n, 1] -> [n, m]`
    BroadcastCols(usize),
    /// `[1, 1] -> [r, c]`
    Expand(usize, usize),
    /// `[n, m] -> [1, m]`
    SumRows,
    /// `[n, m] -> [n, 1]`
    SumCols,
    /// `[n, m] -> [1, 1]`
    Sum,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Log,
    Clamp(f64, f64),
    /// Euclidean norm per row, `[n, m] -> [n, 1]`.
    RowNorm,
    /// `1/x` for `x > 0`, zero otherwise.
    SafeRecip,
    Abs,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Expand(..) => "expand",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Clamp(..) => "clamp",
            Op::RowNorm => "row_norm",
            Op::SafeRecip => "safe_recip",
            Op::Abs => "abs",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    /// Input versions observed when this node was recorded.
    pub(crate) input_versions: Vec<u64>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) version: u64,
}

/// An append-only expression tape.
///
/// Dropping the graph frees every recorded value; training builds one graph
/// per batch.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Op::Leaf, Vec::new(), value, true)
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Op::Constant, Vec::new(), value, false)
    }

    /// Replaces a leaf's value. Nodes recorded from the old value become stale
    /// and `backward` through them fails.
    pub fn set_value(&self, var: Var<'_>, value: Tensor) -> Result<()> {
        self.check(var)?;
        let mut nodes = self.nodes.borrow_mut();
        let node = &mut nodes[var.id.0];
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_value",
                lhs: node.value.shape(),
                rhs: value.shape(),
            });
        }
        node.value = value;
        node.version += 1;
        Ok(())
    }

    pub(crate) fn check(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVariable)
        }
    }

    fn push_raw(&self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let input_versions = inputs.iter().map(|i| nodes[i.0].version).collect();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            inputs,
            input_versions,
            value,
            requires_grad,
            version: 0,
        });
        Var { graph: self, id }
    }

    /// Records an operation whose value has already been computed.
    pub(crate) fn record(&self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|i| nodes[i.0].requires_grad)
        };
        Ok(self.push_raw(op, inputs, value, requires_grad))
    }

    /// Evaluates `op` on the given inputs and records the result.
    pub(crate) fn apply(&self, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &nodes[i.0].value).collect();
            eval(&op, &vals)?
        };
        self.record(op, inputs.to_vec(), value)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

fn expect_shape(op: &'static str, a: &Tensor, shape: [usize; 2]) -> Result<()> {
    if a.shape() == shape {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: shape,
        })
    }
}

/// Forward evaluation of a single op.
pub(crate) fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul => x[0].matmul(x[1])?,
        Op::Transpose => x[0].transpose(),
        Op::Add => {
            same_shape(name, x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape(name, x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape(name, x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a * b)
        }
        Op::Div => {
            same_shape(name, x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a / b)
        }
        Op::AddRow => {
            expect_shape(name, x[1], [1, x[0].cols()])?;
            let (a, b) = (x[0], x[1]);
            let mut out = a.clone();
            let cols = a.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            out
        }
        Op::BroadcastRows(n) => {
            expect_shape(name, x[0], [1, x[0].cols()])?;
            x[0].broadcast_rows(*n)
        }
        Op::BroadcastCols(m) => {
            expect_shape(name, x[0], [x[0].rows(), 1])?;
            x[0].broadcast_cols(*m)
        }
        Op::Expand(r, c) => {
            expect_shape(name, x[0], [1, 1])?;
            Tensor::full(*r, *c, x[0].item())
        }
        Op::SumRows => x[0].sum_rows(),
        Op::SumCols => x[0].sum_cols(),
        Op::Sum => Tensor::scalar(x[0].sum()),
        Op::Scale(c) => x[0].map(|v| v * c),
        Op::AddScalar(c) => x[0].map(|v| v + c),
        Op::Relu => x[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid => x[0].map(sigmoid),
        Op::Square => x[0].map(|v| v * v),
        Op::Sqrt => x[0].map(f64::sqrt),
        Op::Log => x[0].map(f64::ln),
        Op::Clamp(lo, hi) => x[0].map(|v| v.clamp(*lo, *hi)),
        Op::RowNorm => x[0].row_norms(),
        Op::SafeRecip => x[0].map(|v| if v > 0.0 { 1.0 / v } else { 0.0 }),
        Op::Abs => x[0].map(f64::abs),
    })
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// A copy of the cached value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id.0].value.clone()
    }

    /// Runs `f` on the cached value without copying it. The graph is borrowed
    /// for the duration, so `f` must not record new operations.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.graph.nodes.borrow();
        f(&nodes[self.id.0].value)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.with_value(Tensor::shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id.0].requires_grad
    }

    fn unary(self, op: Op) -> Result<Var<'g>> {
        self.graph.apply(op, &[self.id])
    }

    fn binary(self, op: Op, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check(other)?;
        self.graph.apply(op, &[self.id, other.id])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::MatMul, other)
    }

    pub fn t(self) -> Result<Var<'g>> {
        self.unary(Op::Transpose)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Div, other)
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::AddRow, row)
    }

    pub fn broadcast_rows(self, n: usize) -> Result<Var<'g>> {
        self.unary(Op::BroadcastRows(n))
    }

    pub fn broadcast_cols(self, m: usize) -> Result<Var<'g>> {
        self.unary(Op::BroadcastCols(m))
    }

    pub fn expand(self, rows: usize, cols: usize) -> Result<Var<'g>> {
        self.unary(Op::Expand(rows, cols))
    }

    pub fn sum_rows(self) -> Result<Var<'g>> {
        self.unary(Op::SumRows)
    }

    pub fn sum_cols(self) -> Result<Var<'g>> {
        self.unary(Op::SumCols)
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.unary(Op::Sum)
    }

    /// Mean over every element, as a `1 x 1`.
    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.with_value(Tensor::len);
        self.sum()?.scale(1.0 / n.max(1) as f64)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(c))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(Op::Scale(-1.0))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::AddScalar(c))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(Op::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(Op::Sigmoid)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.unary(Op::Square)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary(Op::Sqrt)
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary(Op::Log)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary(Op::Clamp(lo, hi))
    }

    pub fn row_norms(self) -> Result<Var<'g>> {
        self.unary(Op::RowNorm)
    }

    pub fn safe_recip(self) -> Result<Var<'g>> {
        self.unary(Op::SafeRecip)
    }

    /// Elementwise absolute value. First order only.
    pub fn abs(self) -> Result<Var<'g>> {
        self.unary(Op::Abs)
    }
}
