//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding the
//! forward value and enough bookkeeping to run its adjoint rule. Tapes are
//! rebuilt per forward pass and never shared between workers. There is no
//! general broadcasting; the only implicit rule is scalar-with-tensor
//! (`add_scalar`, `mul_scalar`). Everything else requires explicit reshapes.

mod grad_check;
mod kernels;
mod ops;

pub use grad_check::{grad_check, grad_check_multi};
pub(crate) use kernels::{matmul_acc, matmul_bt};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId, f64),
    MulScalar(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    Exp(TensorId),
    Log(TensorId),
    SoftmaxLastDim(TensorId),
    L2Normalize(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    },
    /// Per-location linear projection (a 1x1 convolution without bias).
    Project { input: TensorId, weight: TensorId },
    Linear { weight: TensorId, input: TensorId },
    MaxPool { input: TensorId, window: usize },
    GlobalAvgPool(TensorId),
    Sum(TensorId),
    Dot(TensorId, TensorId),
    CosineSimilarity(TensorId, TensorId),
    /// Cosine similarity of every spatial column of `map` against `vec`.
    CosineMap { map: TensorId, vec: TensorId },
    Outer(TensorId, TensorId),
    VecMat { vec: TensorId, mat: TensorId },
    GatherLoc { map: TensorId, row: usize, col: usize },
    StackLocs { parts: Vec<TensorId>, rows: usize, cols: usize },
    ClampMin(TensorId, f64),
    Reshape(TensorId),
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::CosineSimilarity(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftmaxLastDim(a)
            | Op::L2Normalize(a)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a)
            | Op::ClampMin(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Project { input, weight } => vec![*input, *weight],
            Op::Linear { weight, input } => vec![*weight, *input],
            Op::MaxPool { input, .. } => vec![*input],
            Op::CosineMap { map, vec } => vec![*map, *vec],
            Op::VecMat { vec, mat } => vec![*vec, *mat],
            Op::GatherLoc { map, .. } => vec![*map],
            Op::StackLocs { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Leaf marked as a differentiation target.
    pub requires_grad: bool,
    /// True when this node lies on a path from a `requires_grad` leaf.
    pub needs_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Dynamic compute tape. Nodes are appended in topological order by
/// construction, so one reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiation
    /// target for [`Graph::backward`].
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if numel(&shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            data,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Ok(id)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<TensorId, TensorError> {
        self.constant(vec![value], vec![1])
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any was
    /// accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        op_name: &'static str,
    ) -> Result<TensorId, TensorError> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Ok(id)
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let len = self.nodes[id.0].data.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate (sum over all
    /// paths); calling backward twice on the same graph doubles them.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let loss_shape = self.nodes[loss.0].shape.clone();
        if numel(&loss_shape) != 1 {
            return Err(TensorError::NotScalar { shape: loss_shape });
        }
        self.grad_buf(loss)[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }
}
