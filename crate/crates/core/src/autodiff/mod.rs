//! Reverse-mode autodiff over a recorded graph.
//!
//! Every recorded node carries a `saved` list: the tensors its backward rule
//! will read. A node only saves anything when it `requires_grad`, i.e. when
//! some input transitively depends on a trainable parameter. The memory meter
//! reads these lists directly, so the rules in [`Graph::retention_rule`] are
//! the single definition of what a training step has to keep alive.

mod backward;
mod gradcheck;
mod ops;

use std::collections::{BTreeMap, HashMap, HashSet};

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::param::ParamLookup;
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Param { name: String, trainable: bool },
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Reshape,
    Transpose(usize, usize),
    ConcatTokens,
    SliceTokens { start: usize, len: usize },
    Broadcast,
    Softmax,
    LayerNorm { eps: f64 },
    Gelu,
    Swish { beta: f64 },
    DepthwiseConv2d { kernel: usize },
    CrossEntropy { labels: Vec<usize> },
    Sum,
    LowRank,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Reshape => "reshape",
            Op::Transpose(..) => "transpose",
            Op::ConcatTokens => "concat_tokens",
            Op::SliceTokens { .. } => "slice_tokens",
            Op::Broadcast => "broadcast",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Swish { .. } => "swish",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::LowRank => "low_rank",
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Param { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Tensors (inputs or this node itself) the backward rule reads.
    pub saved: Vec<Var>,
    /// Name of the module that recorded the node, e.g. `block.3` or `csn`.
    pub scope: String,
    /// Set on the tensor a block hands to the next one.
    pub boundary: bool,
    value: Option<Tensor<T>>,
}

impl<T: Element> Node<T> {
    pub fn value(&self) -> Option<&Tensor<T>> {
        self.value.as_ref()
    }

    pub fn nbytes(&self) -> usize {
        self.shape.iter().product::<usize>() * T::DTYPE.size_of()
    }

    pub fn param_name(&self) -> Option<&str> {
        match &self.op {
            Op::Param { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gradients flow from trainable parameters; retention is recorded.
    Train,
    /// Nothing requires grad; nothing is retained.
    Inference,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.grads.insert(name, grad);
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    scopes: Vec<String>,
    param_ids: HashMap<String, Var>,
    block_runs: usize,
}

impl<T: Element> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, scopes: Vec::new(), param_ids: HashMap::new(), block_runs: 0 }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Forward value of `v`. Panics if it was released.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("value was released")
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    pub fn scope(&self) -> &str {
        self.scopes.last().map(String::as_str).unwrap_or("")
    }

    pub fn mark_boundary(&mut self, v: Var) {
        self.nodes[v.0].boundary = true;
    }

    /// Number of transformer blocks executed on this graph.
    pub fn block_runs(&self) -> usize {
        self.block_runs
    }

    pub(crate) fn count_block_run(&mut self) {
        self.block_runs += 1;
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let shape = value.shape().to_vec();
        self.push_node(Op::Constant, Vec::new(), shape, false, Vec::new(), value)
    }

    /// Drops the name-to-node memo so the next [`Graph::param`] calls read a
    /// different store. Nodes already recorded are kept.
    pub fn forget_params(&mut self) {
        self.param_ids.clear();
    }

    /// Leaf for a named parameter. Repeated requests return the same node so
    /// that shared parameters accumulate a single gradient.
    pub fn param(&mut self, params: &dyn ParamLookup<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_ids.get(name) {
            return Ok(v);
        }
        let p = params.lookup(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        let trainable = p.trainable && self.mode == Mode::Train;
        let value = p.tensor.clone();
        let shape = value.shape().to_vec();
        let v = self.push_node(
            Op::Param { name: name.into(), trainable },
            Vec::new(),
            shape,
            trainable,
            Vec::new(),
            value,
        );
        self.param_ids.insert(name.into(), v);
        Ok(v)
    }

    /// Which operands an op's backward rule reads, given which inputs
    /// require grad. `out` is the node being recorded.
    pub fn retention_rule(op: &Op, inputs: &[Var], input_rg: &[bool], out: Var) -> Vec<Var> {
        let any = |idx: &[usize]| idx.iter().any(|&i| input_rg[i]);
        let mut saved = Vec::new();
        match op {
            Op::MatMul | Op::Mul => {
                if input_rg[1] {
                    saved.push(inputs[0]);
                }
                if input_rg[0] {
                    saved.push(inputs[1]);
                }
            }
            Op::Softmax => saved.push(out),
            Op::LayerNorm { .. } => {
                if any(&[0, 1]) {
                    saved.push(inputs[0]);
                }
                if input_rg[0] {
                    saved.push(inputs[1]);
                }
            }
            Op::Gelu | Op::Swish { .. } | Op::CrossEntropy { .. } => saved.push(inputs[0]),
            Op::DepthwiseConv2d { .. } => {
                if input_rg[1] {
                    saved.push(inputs[0]);
                }
                if input_rg[0] {
                    saved.push(inputs[1]);
                }
            }
            Op::LowRank => {
                if any(&[1, 2]) {
                    saved.push(inputs[0]);
                }
                if any(&[0, 2]) {
                    saved.push(inputs[1]);
                }
                if any(&[0, 1]) {
                    saved.push(inputs[2]);
                }
            }
            Op::Constant
            | Op::Param { .. }
            | Op::Add
            | Op::Scale(_)
            | Op::Reshape
            | Op::Transpose(..)
            | Op::ConcatTokens
            | Op::SliceTokens { .. }
            | Op::Broadcast
            | Op::Sum => {}
        }
        saved.dedup();
        saved
    }

    pub(crate) fn record(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let input_rg: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
        let requires_grad = self.mode == Mode::Train && input_rg.iter().any(|&r| r);
        let out = Var(self.nodes.len());
        let saved = if requires_grad { Self::retention_rule(&op, &inputs, &input_rg, out) } else { Vec::new() };
        let shape = value.shape().to_vec();
        self.push_node(op, inputs, shape, requires_grad, saved, value)
    }

    fn push_node(
        &mut self,
        op: Op,
        inputs: Vec<Var>,
        shape: Vec<usize>,
        requires_grad: bool,
        saved: Vec<Var>,
        value: Tensor<T>,
    ) -> Var {
        let v = Var(self.nodes.len());
        let scope = self.scope().to_string();
        self.nodes.push(Node { op, inputs, shape, requires_grad, saved, scope, boundary: false, value: Some(value) });
        v
    }

    /// Every node id that some node retains for backward.
    pub fn retained_ids(&self) -> HashSet<usize> {
        self.nodes.iter().filter(|n| n.requires_grad).flat_map(|n| n.saved.iter().map(|v| v.0)).collect()
    }

    /// Tensors retained by nodes that `root` depends on. Side branches that
    /// never reach `root` get no gradient from it, so what they keep is not needed.
    pub fn retained_for(&self, root: Var) -> HashSet<usize> {
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        let mut keep = HashSet::new();
        for id in (0..=root.0).rev() {
            if !live[id] {
                continue;
            }
            let node = &self.nodes[id];
            for v in &node.inputs {
                live[v.0] = true;
            }
            if node.requires_grad {
                keep.extend(node.saved.iter().map(|v| v.0));
            }
        }
        keep
    }

    /// Drops every forward value that no backward rule retained. Backward must
    /// still produce identical gradients afterwards.
    pub fn release_unsaved(&mut self) {
        let keep = self.retained_ids();
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !keep.contains(&id) {
                node.value = None;
            }
        }
    }

    /// Drops the forward value of node `id`.
    pub fn release(&mut self, id: usize) {
        self.nodes[id].value = None;
    }

    /// Reads a retained tensor on behalf of `node`'s backward rule.
    pub(crate) fn saved_value(&self, node: usize, v: Var) -> Result<&Tensor<T>> {
        let n = &self.nodes[node];
        if !n.saved.contains(&v) {
            return Err(Error::NotRetained { op: n.op.kind(), node: v.0 });
        }
        self.nodes[v.0].value.as_ref().ok_or(Error::NotRetained { op: n.op.kind(), node: v.0 })
    }
}
