//! Simulated training memory, read off the retention ledger.
//!
//! Cached activation bytes are the tensors some `requires_grad` node on the
//! path to the measured output keeps for its backward rule, counted once per
//! node id. Parameters are excluded
//! there (they live in `param_bytes`); constant inputs are included.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::report::to_csv;
use crate::petl::{attach, AdaptedModel, AdapterSpec};
use crate::tensor::{Element, Tensor};
use crate::vit::{ViT, ViTConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScopeMemory {
    pub tensors: usize,
    pub bytes: usize,
    /// Retained tensors that are block outputs.
    pub boundary_tensors: usize,
    pub boundary_bytes: usize,
}

impl ScopeMemory {
    pub fn interior_bytes(&self) -> usize {
        self.bytes - self.boundary_bytes
    }

    pub fn interior_tensors(&self) -> usize {
        self.tensors - self.boundary_tensors
    }
}

/// What a recorded graph retains, grouped by the scope that produced each tensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Retention {
    pub total_bytes: usize,
    pub total_tensors: usize,
    pub by_scope: BTreeMap<String, ScopeMemory>,
}

impl Retention {
    pub fn block(&self, i: usize) -> ScopeMemory {
        self.by_scope.get(&format!("block.{i}")).cloned().unwrap_or_default()
    }
}

/// Reads the ledger of a recorded graph for a backward pass from `root`.
pub fn retention<T: Element>(g: &Graph<T>, root: Var) -> Result<Retention> {
    if g.is_empty() {
        return Err(Error::NoForward);
    }
    g.node(root)?;
    let mut ids: Vec<usize> = g.retained_for(root).into_iter().collect();
    ids.sort_unstable();
    let mut out = Retention::default();
    for id in ids {
        let node = &g.nodes()[id];
        if matches!(node.op, Op::Param { .. }) {
            continue;
        }
        let bytes = node.nbytes();
        let entry = out.by_scope.entry(node.scope.clone()).or_default();
        entry.tensors += 1;
        entry.bytes += bytes;
        if node.boundary {
            entry.boundary_tensors += 1;
            entry.boundary_bytes += bytes;
        }
        out.total_bytes += bytes;
        out.total_tensors += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub spec: String,
    pub m: Option<usize>,
    pub batch_shape: Vec<usize>,
    pub cached_activation_bytes: usize,
    pub retention: Retention,
    pub param_bytes: usize,
    pub trainable_param_bytes: usize,
    pub optimizer_state_bytes: usize,
    pub grand_total: usize,
}

impl MemoryReport {
    pub fn from_graph<T: Element>(model: &AdaptedModel<T>, g: &Graph<T>, root: Var, batch_shape: &[usize]) -> Result<Self> {
        let retention = retention(g, root)?;
        let param_bytes = model.params.nbytes();
        let trainable_param_bytes = model.params.trainable().map(|p| p.tensor.nbytes()).sum();
        let optimizer_state_bytes = 2 * trainable_param_bytes;
        let cached = retention.total_bytes;
        Ok(Self {
            spec: model.spec.name().to_string(),
            m: model.spec.csn_config().map(|c| c.m),
            batch_shape: batch_shape.to_vec(),
            cached_activation_bytes: cached,
            retention,
            param_bytes,
            trainable_param_bytes,
            optimizer_state_bytes,
            grand_total: cached + param_bytes + optimizer_state_bytes,
        })
    }
}

/// Records one training forward (images to logits) on a zero batch of
/// `batch` images and reports what it retains.
pub fn measure<T: Element>(model: &AdaptedModel<T>, batch: usize) -> Result<MemoryReport> {
    let cfg = &model.vit;
    let shape = [batch, cfg.channels, cfg.img, cfg.img];
    let mut g = Graph::train();
    let logits = model.forward(&mut g, &Tensor::zeros(&shape))?;
    MemoryReport::from_graph(model, &g, logits, &shape)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub spec: String,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub batch: usize,
    pub cached_bytes: usize,
    pub param_bytes: usize,
    pub opt_bytes: usize,
    pub total: usize,
    pub ratio_vs_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub reports: Vec<MemoryReport>,
}

/// One report per spec plus cached-byte ratios against full fine-tuning.
pub fn compare<T: Element>(specs: &[AdapterSpec], backbone: &ViT<T>, n_classes: usize, batch: usize) -> Result<Comparison> {
    let full = measure(&attach(&AdapterSpec::Full, backbone, n_classes, 0)?, batch)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for spec in specs {
        let r = if *spec == AdapterSpec::Full { full.clone() } else { measure(&attach(spec, backbone, n_classes, 0)?, batch)? };
        rows.push(CompareRow {
            spec: r.spec.clone(),
            m: r.m,
            batch,
            cached_bytes: r.cached_activation_bytes,
            param_bytes: r.param_bytes,
            opt_bytes: r.optimizer_state_bytes,
            total: r.grand_total,
            ratio_vs_full: r.cached_activation_bytes as f64 / full.cached_activation_bytes as f64,
        });
        reports.push(r);
    }
    Ok(Comparison { rows, reports })
}

/// Reports for a side-network spec at each injection index.
pub fn sweep_m<T: Element>(spec: &AdapterSpec, backbone: &ViT<T>, n_classes: usize, batch: usize, ms: &[usize]) -> Result<Vec<MemoryReport>> {
    let n = backbone.config.depth;
    if spec.csn_config().is_none() {
        return Err(Error::Config(vec![format!("sweep over M needs dtl or dtl+, got {}", spec.name())]));
    }
    if let Some(&bad) = ms.iter().find(|&&m| m == 0 || m > n + 1) {
        return Err(Error::Config(vec![format!("M = {bad} outside 1..={}", n + 1)]));
    }
    ms.iter().map(|&m| measure(&attach(&spec.with_m(m), backbone, n_classes, 0)?, batch)).collect()
}

pub fn rows_to_csv(rows: &[CompareRow]) -> Result<String> {
    to_csv(rows)
}

/// Rows for a sweep, with ratios against a given full fine-tuning footprint.
pub fn sweep_rows(reports: &[MemoryReport], full_cached: usize) -> Vec<CompareRow> {
    reports
        .iter()
        .map(|r| CompareRow {
            spec: r.spec.clone(),
            m: r.m,
            batch: r.batch_shape[0],
            cached_bytes: r.cached_activation_bytes,
            param_bytes: r.param_bytes,
            opt_bytes: r.optimizer_state_bytes,
            total: r.grand_total,
            ratio_vs_full: r.cached_activation_bytes as f64 / full_cached as f64,
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ScopeRow<'a> {
    scope: &'a str,
    tensors: usize,
    bytes: usize,
    boundary_tensors: usize,
    interior_bytes: usize,
}

/// Per-scope breakdown as CSV, embed first, then blocks in order.
pub fn scopes_to_csv(report: &MemoryReport) -> Result<String> {
    let mut scopes: Vec<(&String, &ScopeMemory)> = report.retention.by_scope.iter().collect();
    scopes.sort_by_key(|(k, _)| scope_order(k));
    let rows: Vec<ScopeRow> = scopes
        .into_iter()
        .map(|(k, v)| ScopeRow {
            scope: k,
            tensors: v.tensors,
            bytes: v.bytes,
            boundary_tensors: v.boundary_tensors,
            interior_bytes: v.interior_bytes(),
        })
        .collect();
    to_csv(&rows)
}

fn scope_order(scope: &str) -> (usize, usize, String) {
    match scope.strip_prefix("block.").and_then(|i| i.parse::<usize>().ok()) {
        Some(i) => (1, i, String::new()),
        None if scope == "embed" || scope == "prefix" => (0, 0, scope.to_string()),
        None => (2, 0, scope.to_string()),
    }
}

/// Default comparison set on a config of depth `depth`.
pub fn default_specs(depth: usize) -> Vec<AdapterSpec> {
    ["full", "linear", "bitfit", "lora", "dtl", "dtl+"]
        .iter()
        .map(|n| AdapterSpec::from_name(n, depth).expect("known name"))
        .collect()
}

/// Cached-activation bytes of a spec on `cfg` at `batch`, using a fresh backbone.
pub fn cached_bytes(spec: &AdapterSpec, cfg: &ViTConfig, batch: usize) -> Result<usize> {
    let vit = ViT::<f32>::init(cfg.clone(), 0)?;
    Ok(measure(&attach(spec, &vit, 10, 0)?, batch)?.cached_activation_bytes)
}
