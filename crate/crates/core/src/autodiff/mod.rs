//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed op in execution order, which is
//! already a topological order: an op can only consume nodes that exist.
//! [`Graph::backward`] walks the tape once in reverse, so each node is
//! visited exactly once and gradients of nodes with several consumers are
//! summed before they are propagated further.
//!
//! Parameters live outside the graph (see [`crate::params::ParamStore`]).
//! Each step binds them as leaves with [`Graph::param`]; a frozen parameter
//! is bound as a constant, so no gradient is computed for it and no
//! gradient can flow through it.

mod conv;
pub(crate) mod kernels;
mod loss;
mod norm;
mod pointwise;
mod spatial;

pub use loss::LossKind;
pub use norm::{BatchNormState, BN_EPS, BN_MOMENTUM};
pub use pointwise::Activation;

use crate::error::TensorError;
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch-norm and the Bernoulli noise channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Zero-padding policy for [`Graph::conv2d`]. Stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size; odd padding puts the extra row/column
    /// on the bottom/right.
    Same,
    Valid,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, pads: kernels::Pads },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    Crop { input: Var, top: usize, left: usize },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Activation { input: Var, kind: Activation },
    Dense { input: Var, weight: Var, bias: Var },
    Concat { a: Var, b: Var },
    Mask { input: Var, mask: Vec<T> },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Loss { pred: Var, target: Var, kind: LossKind },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// The recorded computation of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether it receives a
    /// gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf, None)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor.with_requires_grad(false), Op::Leaf, None)
    }

    /// Binds a stored parameter. When `trainable` is false it enters the
    /// graph as a constant.
    pub fn param(&mut self, id: ParamId, tensor: &Tensor<T>, trainable: bool) -> Var {
        let mut value = tensor.clone();
        value.clear_grad();
        value.set_requires_grad(trainable);
        self.push_node(value, Op::Leaf, Some(id))
    }

    /// Copies the value of `v` into a new constant leaf: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter leaf after [`Graph::backward`].
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| {
            let id = node.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }

    /// Topological order check: every op input precedes its consumer.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, node)| op_inputs(&node.op).iter().all(|v| v.0 < i))
    }

    pub(crate) fn push_node(&mut self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op result after checking it is finite; its `requires_grad`
    /// is the OR over its inputs.
    pub(crate) fn push_op(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = op_inputs(&op).iter().any(|&v| self.requires_grad(v));
        Ok(self.push_node(value.with_requires_grad(needs), op, None))
    }

    /// Reverse sweep from a scalar `root`, populating leaf gradients.
    ///
    /// Intermediate gradients are released once propagated; only leaves
    /// keep theirs.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let root_needs = root_value.requires_grad();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !root_needs {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) -> Result<(), TensorError> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad();
        let mut sink = GradSink { grads, wants: &wants };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, pads } => {
                conv::conv2d_backward(val(*input), val(*kernel), *pads, out.shape(), g, *input, *kernel, *bias, &mut sink)
            }
            Op::ConvTranspose2d { input, kernel, bias } => {
                conv::conv_transpose2d_backward(val(*input), val(*kernel), out.shape(), g, *input, *kernel, *bias, &mut sink)
            }
            Op::MaxPool { input, argmax } => spatial::maxpool_backward(val(*input), argmax, g, *input, &mut sink),
            Op::Upsample { input, factor } => spatial::upsample_backward(val(*input), *factor, g, *input, &mut sink),
            Op::Crop { input, top, left } => {
                spatial::crop_backward(val(*input), out.shape(), *top, *left, g, *input, &mut sink)
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                norm::batch_norm_train_backward(val(*input).shape(), val(*gamma), xhat, inv_std, g, *input, *gamma, *beta, &mut sink)
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                norm::batch_norm_eval_backward(val(*input).shape(), val(*gamma), xhat, inv_std, g, *input, *gamma, *beta, &mut sink)
            }
            Op::Activation { input, kind } => pointwise::activation_backward(*kind, out, g, *input, &mut sink),
            Op::Dense { input, weight, bias } => {
                pointwise::dense_backward(val(*input), val(*weight), g, *input, *weight, *bias, &mut sink)
            }
            Op::Concat { a, b } => pointwise::concat_backward(val(*a), val(*b), g, *a, *b, &mut sink),
            Op::Mask { input, mask } => {
                sink.add(*input, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Reshape { input } => sink.add(*input, g.to_vec()),
            Op::Add { a, b } => {
                sink.add(*a, g.to_vec());
                sink.add(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if sink.wants(*a) {
                    sink.add(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if sink.wants(*b) {
                    sink.add(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale { input, factor } => sink.add(*input, g.iter().map(|&g| g * *factor).collect()),
            Op::Sum { input } => sink.add(*input, vec![g[0]; val(*input).numel()]),
            Op::Loss { pred, target, kind } => loss::loss_backward(*kind, val(*pred), val(*target), g[0], *pred, *target, &mut sink),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                loss::softmax_xent_backward(val(*logits).shape(), labels, probs, g[0], *logits, &mut sink)
            }
        }
        Ok(())
    }
}

/// Accumulates gradient contributions into the inputs that want them.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    wants: &'a dyn Fn(Var) -> bool,
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        (self.wants)(v)
    }

    pub(crate) fn add(&mut self, v: Var, contribution: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, bias, .. } | Op::ConvTranspose2d { input, kernel, bias } => {
            vec![*input, *kernel, *bias]
        }
        Op::BatchNormTrain { input, gamma, beta, .. } | Op::BatchNormEval { input, gamma, beta, .. } => {
            vec![*input, *gamma, *beta]
        }
        Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
        Op::MaxPool { input, .. }
        | Op::Upsample { input, .. }
        | Op::Crop { input, .. }
        | Op::Activation { input, .. }
        | Op::Mask { input, .. }
        | Op::Reshape { input }
        | Op::Scale { input, .. }
        | Op::Sum { input } => vec![*input],
        Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Loss { pred, target, .. } => vec![*pred, *target],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}
