//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Cloning the handle shares
//! the underlying buffer; use [`Tensor::deep_copy`] for an independent leaf.
//! Every differentiable op records a graph node when any of its inputs
//! requires a gradient, and [`Tensor::backward`] walks that graph in reverse
//! topological order.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::finite_difference_check;
pub use optim::{Adam, AdamConfig};

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    Log,
    SqrtClamped(f64),
    Softmax(f64),
    LogSoftmax(f64),
    SumAll,
    MeanAll,
    SumRows,
    PairwiseSqDist,
    ConcatCols,
    Gather(Vec<usize>),
    SliceCols(usize, usize),
    L2NormalizeRows,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::SqrtClamped(_) => "sqrt_clamped",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumRows => "sum_rows",
            Op::PairwiseSqDist => "pairwise_sq_dist",
            Op::ConcatCols => "concat_cols",
            Op::Gather(_) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::L2NormalizeRows => "l2_normalize_rows",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Shared handle to a dense row-major tensor.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    /// Row-major matrix from a slice of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, &[rows.len(), cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rows(&self) -> usize {
        self.0.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.0.shape.len() >= 2 {
            self.0.shape[1]
        } else {
            1
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the buffer, used by optimizers and model averaging.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_handle(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Independent leaf with copied data and the same `requires_grad` flag.
    pub fn deep_copy(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), self.0.requires_grad, None)
    }

    /// Constant copy that blocks backpropagation.
    pub fn stop_gradient(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<Tensor>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(Node { op, parents });
        Ok(Self::build(data, shape, requires_grad, node))
    }

    /// Accumulates `d self / d leaf` into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for tensor in order.iter().rev() {
            let Some(grad_out) = grads.remove(&tensor.key()) else {
                continue;
            };
            match tensor.node() {
                None => {
                    let mut slot = tensor.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(node) => {
                    let parent_grads = ops::backward_node(node, tensor, &grad_out);
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        grads
                            .entry(parent.key())
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    // Post-order DFS; iterative so deep graphs cannot overflow the stack.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.key()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(node) = tensor.node() {
                for parent in &node.parents {
                    if parent.requires_grad() && !visited.contains(&parent.key()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}
