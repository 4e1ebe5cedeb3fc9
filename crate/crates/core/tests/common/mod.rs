//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use dtl_core::autodiff::{Graph, Op, Var};
use dtl_core::Element;

/// Retained tensors found by walking the recorded tape backwards from `root`.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Walk {
    pub bytes: usize,
    pub tensors: usize,
    /// `(tensors, bytes, boundary tensors)` per recording scope.
    pub by_scope: BTreeMap<String, (usize, usize, usize)>,
}

/// Which operands a node's reverse rule must read, given which of its inputs
/// carry gradient. Written from the derivative of each op.
fn needed(op: &Op, inputs: &[usize], rg: &[bool], own: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut need = |v: usize, when: bool| {
        if when {
            out.push(v);
        }
    };
    match op {
        // d(ab)/da = b, d(ab)/db = a.
        Op::MatMul | Op::Mul => {
            need(inputs[0], rg[1]);
            need(inputs[1], rg[0]);
        }
        // y·(g − Σ g·y) reads only the output.
        Op::Softmax => need(own, true),
        // dγ needs x̂ (so x); dx needs x and γ; dβ needs nothing.
        Op::LayerNorm { .. } => {
            need(inputs[0], rg[0] || rg[1]);
            need(inputs[1], rg[0]);
        }
        Op::Gelu | Op::Swish { .. } | Op::CrossEntropy { .. } => need(inputs[0], true),
        // Convolution is bilinear in (x, kernel); the bias gradient is a sum.
        Op::DepthwiseConv2d { .. } => {
            need(inputs[0], rg[1]);
            need(inputs[1], rg[0]);
        }
        // (x a) c: each factor's gradient reads the other two.
        Op::LowRank => {
            need(inputs[0], rg[1] || rg[2]);
            need(inputs[1], rg[0] || rg[2]);
            need(inputs[2], rg[0] || rg[1]);
        }
        _ => {}
    }
    out
}

/// Walks every node `root` depends on and that carries gradient, collecting
/// what its reverse rule reads. Parameters are not counted.
pub fn tape_walk<T: Element>(g: &Graph<T>, root: Var) -> Walk {
    let nodes = g.nodes();
    let mut reachable = vec![false; nodes.len()];
    reachable[root.id()] = true;
    for id in (0..=root.id()).rev() {
        if reachable[id] {
            for v in &nodes[id].inputs {
                reachable[v.id()] = true;
            }
        }
    }
    let mut kept = HashSet::new();
    for (id, node) in nodes.iter().enumerate() {
        if !reachable[id] || !node.requires_grad || node.inputs.is_empty() {
            continue;
        }
        let rg: Vec<bool> = node.inputs.iter().map(|v| nodes[v.id()].requires_grad).collect();
        let inputs: Vec<usize> = node.inputs.iter().map(|v| v.id()).collect();
        kept.extend(needed(&node.op, &inputs, &rg, id));
    }
    let mut walk = Walk::default();
    for id in kept {
        let node = &nodes[id];
        if matches!(node.op, Op::Param { .. }) {
            continue;
        }
        let bytes = node.shape.iter().product::<usize>() * T::DTYPE.size_of();
        walk.bytes += bytes;
        walk.tensors += 1;
        let e = walk.by_scope.entry(node.scope.clone()).or_default();
        e.0 += 1;
        e.1 += bytes;
        e.2 += usize::from(node.boundary);
    }
    walk
}

/// The meter's view in the same shape as [`Walk`].
pub fn meter_walk(r: &dtl_core::memory::Retention) -> Walk {
    Walk {
        bytes: r.total_bytes,
        tensors: r.total_tensors,
        by_scope: r.by_scope.iter().map(|(k, v)| (k.clone(), (v.tensors, v.bytes, v.boundary_tensors))).collect(),
    }
}
