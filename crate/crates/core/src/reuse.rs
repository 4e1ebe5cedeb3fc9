//! Multi-task inference over one frozen backbone: blocks `1..M−1` run once
//! and their streams fan out to every task's side network and suffix.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::checks::jitter_trainable;
use crate::csn::{CsnConfig, CsnVariant};
use crate::error::{Error, Result};
use crate::param::{Layered, ParamStore};
use crate::petl::{attach, AdaptedModel, AdapterSpec};
use crate::tensor::{Element, Tensor};
use crate::vit::{ViT, ViTConfig};

/// One downstream task: its side network and head.
#[derive(Debug, Clone)]
pub struct TaskBundle<T> {
    pub task_id: String,
    /// A `dtl` or `dtl+` spec; its `m` is the task's injection index.
    pub spec: AdapterSpec,
    pub n_classes: usize,
    /// `csn.*` and `head.*` parameters.
    pub params: ParamStore<T>,
}

impl<T: Element> TaskBundle<T> {
    /// The task-specific part of a trained model.
    pub fn from_model(task_id: impl Into<String>, model: &AdaptedModel<T>) -> Result<Self> {
        csn_of(&model.spec)?;
        Ok(Self { task_id: task_id.into(), spec: model.spec.clone(), n_classes: model.n_classes, params: model.task_params() })
    }

    pub fn m(&self) -> Result<usize> {
        Ok(csn_of(&self.spec)?.m)
    }

    fn view(&self, cfg: &ViTConfig) -> AdaptedModel<T> {
        AdaptedModel {
            vit: cfg.clone(),
            spec: self.spec.clone(),
            n_classes: self.n_classes,
            params: ParamStore::new(),
            warnings: Vec::new(),
        }
    }
}

fn csn_of(spec: &AdapterSpec) -> Result<CsnConfig> {
    spec.csn_config()
        .ok_or_else(|| Error::Config(vec![format!("feature reuse needs a dtl or dtl+ task, got {}", spec.name())]))
}

/// `count` tasks of `spec` on `backbone` with randomised side networks and
/// heads, so each task's output differs from the backbone's.
pub fn random_tasks<T: Element>(
    backbone: &ViT<T>,
    spec: &AdapterSpec,
    count: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<TaskBundle<T>>> {
    csn_of(spec)?;
    (0..count)
        .map(|k| {
            let task_seed = seed.wrapping_add(k as u64);
            let mut model = attach(spec, backbone, n_classes, task_seed)?;
            jitter_trainable(&mut model.params, 0.25, task_seed ^ 0x7a5c);
            TaskBundle::from_model(format!("task{k:02}"), &model)
        })
        .collect()
}

/// Logits per task and how many backbone blocks ran to produce them.
#[derive(Debug, Clone)]
pub struct MultiTaskOutput<T> {
    pub logits: Vec<Tensor<T>>,
    pub block_runs: usize,
}

/// The injection index all tasks share.
pub fn common_m<T: Element>(tasks: &[TaskBundle<T>]) -> Result<usize> {
    let first = tasks.first().ok_or_else(|| Error::Config(vec!["feature reuse needs at least one task".into()]))?;
    let m = first.m()?;
    let mut errs = Vec::new();
    for t in &tasks[1..] {
        let mt = t.m()?;
        if mt != m {
            errs.push(format!("task {} has M = {mt}, task {} has M = {m}", t.task_id, first.task_id));
        }
    }
    if errs.is_empty() {
        Ok(m)
    } else {
        Err(Error::Config(errs))
    }
}

/// Runs the shared prefix once, then each task's suffix on the cached streams.
pub fn shared_prefix_infer<T: Element>(backbone: &ViT<T>, tasks: &[TaskBundle<T>], images: &Tensor<T>) -> Result<MultiTaskOutput<T>> {
    let m = common_m(tasks)?;
    let cfg = &backbone.config;
    let mut g = Graph::inference();
    let mut logits = Vec::with_capacity(tasks.len());
    if m == 1 {
        for t in tasks {
            g.forget_params();
            let out = t.view(cfg).forward_with(&mut g, &Layered { top: &t.params, base: &backbone.params }, images)?;
            logits.push(g.value(out).clone());
        }
        return Ok(MultiTaskOutput { logits, block_runs: g.block_runs() });
    }
    let prefix = tasks[0].view(cfg).run_prefix_on(&mut g, &backbone.params, images)?;
    for t in tasks {
        g.forget_params();
        let out = t.view(cfg).forward_from(&mut g, &Layered { top: &t.params, base: &backbone.params }, &prefix)?;
        logits.push(g.value(out).clone());
    }
    Ok(MultiTaskOutput { logits, block_runs: g.block_runs() })
}

/// Each task run end to end on its own.
pub fn standalone_infer<T: Element>(backbone: &ViT<T>, tasks: &[TaskBundle<T>], images: &Tensor<T>) -> Result<MultiTaskOutput<T>> {
    let mut g = Graph::inference();
    let mut logits = Vec::with_capacity(tasks.len());
    for t in tasks {
        csn_of(&t.spec)?;
        g.forget_params();
        let out = t.view(&backbone.config).forward_with(&mut g, &Layered { top: &t.params, base: &backbone.params }, images)?;
        logits.push(g.value(out).clone());
    }
    Ok(MultiTaskOutput { logits, block_runs: g.block_runs() })
}

/// Multiply-adds times two for one block on one image.
pub fn block_flops(n_tokens: usize, d: usize, mlp_ratio: usize) -> u64 {
    let (n, d, h) = (n_tokens as u64, d as u64, (mlp_ratio * d) as u64);
    let projections = 4 * n * d * d;
    let attention = 2 * n * n * d;
    let ffn = 2 * n * d * h;
    2 * (projections + attention + ffn)
}

/// Side-network cost for one task on one image: every `(a, c)` step, plus
/// the shared convolution at each injection for `dtl+`.
pub fn csn_flops(cfg: &ViTConfig, csn: &CsnConfig) -> u64 {
    let n = cfg.n_tokens() as u64;
    let steps: u64 = (1..=cfg.depth).map(|i| 2 * 2 * n * cfg.dim_at(i) as u64 * csn.d_prime as u64).sum();
    let conv = match csn.variant {
        CsnVariant::Dtl => 0,
        CsnVariant::DtlPlus => {
            let injections = (cfg.depth + 1 - csn.m) as u64;
            injections * 2 * (csn.kernel * csn.kernel) as u64 * cfg.n_patches() as u64 * cfg.final_dim() as u64
        }
    };
    steps + conv
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub tasks: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub block_executions_standalone: usize,
    pub block_executions_shared: usize,
    pub standalone_flops: u64,
    pub shared_flops: u64,
    pub saving_fraction: f64,
}

/// Analytic per-image cost of serving `tasks` side networks over one backbone,
/// counting block compute and side-network overhead.
pub fn flop_report(cfg: &ViTConfig, csn: &CsnConfig, tasks: usize) -> Result<FlopReport> {
    cfg.validate()?;
    csn.validate(cfg.depth)?;
    if tasks == 0 {
        return Err(Error::Config(vec!["feature reuse needs at least one task".into()]));
    }
    let n = cfg.depth;
    let shared_blocks = csn.m - 1;
    let block = |i: usize| block_flops(cfg.n_tokens(), cfg.dim_at(i), cfg.mlp_ratio);
    let prefix: u64 = (1..=shared_blocks).map(block).sum();
    let suffix: u64 = (csn.m..=n).map(block).sum();
    let side = csn_flops(cfg, csn);
    let t = tasks as u64;
    let standalone = t * (prefix + suffix + side);
    let shared = prefix + t * (suffix + side);
    Ok(FlopReport {
        tasks,
        m: csn.m,
        n,
        block_executions_standalone: tasks * n,
        block_executions_shared: shared_blocks + tasks * (n - shared_blocks),
        standalone_flops: standalone,
        shared_flops: shared,
        saving_fraction: 1.0 - shared as f64 / standalone as f64,
    })
}
