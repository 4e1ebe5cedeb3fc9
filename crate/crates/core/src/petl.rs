//! Fine-tuning strategies and the adapted model that runs them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::csn::{self, CsnConfig, CsnVariant};
use crate::error::{shape_err, Error, Result};
use crate::param::{uniform, Param, ParamLookup, ParamRole, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vit::{block_forward, embed, pooled_features, stage_transition, BlockHooks, Proj, ViT, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VptMode {
    Shallow,
    Deep,
}

fn default_beta() -> f64 {
    100.0
}

fn default_kernel() -> usize {
    3
}

/// One fine-tuning strategy with its hyperparameters. Serialised as the
/// `[adapter]` section of a run config, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdapterSpec {
    Full,
    Linear,
    #[serde(rename = "bitfit")]
    BitFit,
    Vpt { mode: VptMode, prompts: usize },
    Adapter { d_prime: usize },
    #[serde(rename = "adaptformer")]
    AdaptFormer { d_prime: usize, scale: f64 },
    Ssf,
    #[serde(rename = "lora")]
    LoRA { rank: usize },
    Dtl {
        d_prime: usize,
        m: usize,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    #[serde(rename = "dtl+")]
    DtlPlus {
        d_prime: usize,
        m: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
}

/// Names accepted by [`AdapterSpec::from_name`].
pub const SPEC_NAMES: &[&str] =
    &["full", "linear", "bitfit", "vpt-shallow", "vpt-deep", "adapter", "adaptformer", "ssf", "lora", "dtl", "dtl+"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub adapter: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UnitCensus {
    pub in_block: usize,
    pub total: usize,
}

impl AdapterSpec {
    /// Default hyperparameters for a named strategy: rank/width 2 for the
    /// side network (M = 7, or N+1 on shallower backbones), rank 8 for LoRA.
    pub fn from_name(name: &str, depth: usize) -> Result<Self> {
        let m = 7.min(depth + 1);
        Ok(match name {
            "full" => Self::Full,
            "linear" => Self::Linear,
            "bitfit" => Self::BitFit,
            "vpt-shallow" => Self::Vpt { mode: VptMode::Shallow, prompts: 4 },
            "vpt-deep" => Self::Vpt { mode: VptMode::Deep, prompts: 4 },
            "adapter" => Self::Adapter { d_prime: 8 },
            "adaptformer" => Self::AdaptFormer { d_prime: 8, scale: 0.1 },
            "ssf" => Self::Ssf,
            "lora" => Self::LoRA { rank: 8 },
            "dtl" => Self::Dtl { d_prime: 2, m, beta: 100.0 },
            "dtl+" => Self::DtlPlus { d_prime: 2, m, beta: 100.0, kernel: 3 },
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown adapter spec {other:?}; valid names: {}",
                    SPEC_NAMES.join(", ")
                )]))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Linear => "linear",
            Self::BitFit => "bitfit",
            Self::Vpt { mode: VptMode::Shallow, .. } => "vpt-shallow",
            Self::Vpt { mode: VptMode::Deep, .. } => "vpt-deep",
            Self::Adapter { .. } => "adapter",
            Self::AdaptFormer { .. } => "adaptformer",
            Self::Ssf => "ssf",
            Self::LoRA { .. } => "lora",
            Self::Dtl { .. } => "dtl",
            Self::DtlPlus { .. } => "dtl+",
        }
    }

    pub fn csn_config(&self) -> Option<CsnConfig> {
        match *self {
            Self::Dtl { d_prime, m, beta } => Some(CsnConfig { d_prime, m, beta, variant: CsnVariant::Dtl, kernel: 3 }),
            Self::DtlPlus { d_prime, m, beta, kernel } => {
                Some(CsnConfig { d_prime, m, beta, variant: CsnVariant::DtlPlus, kernel })
            }
            _ => None,
        }
    }

    pub fn with_m(&self, m: usize) -> Self {
        let mut s = self.clone();
        if let Self::Dtl { m: mm, .. } | Self::DtlPlus { m: mm, .. } = &mut s {
            *mm = m;
        }
        s
    }

    /// Hyperparameter checks; returns non-fatal warnings.
    pub fn validate(&self, cfg: &ViTConfig) -> Result<Vec<String>> {
        let widths = block_widths(cfg);
        let min_d = widths.iter().copied().min().unwrap_or(0);
        let mut problems = Vec::new();
        let mut warnings = Vec::new();
        match self {
            Self::Vpt { prompts, .. } if *prompts == 0 => problems.push("adapter.prompts must be at least 1".into()),
            Self::Adapter { d_prime } | Self::AdaptFormer { d_prime, .. } => {
                if *d_prime == 0 {
                    problems.push("adapter.d_prime must be at least 1".into());
                } else if *d_prime >= min_d {
                    warnings.push(format!("adapter.d_prime = {d_prime} is not smaller than the width {min_d}"));
                }
                if let Self::AdaptFormer { scale, .. } = self {
                    if !(*scale > 0.0) || !scale.is_finite() {
                        problems.push(format!("adapter.scale must be positive, got {scale}"));
                    }
                }
            }
            Self::LoRA { rank } => {
                if *rank == 0 || *rank > min_d {
                    problems.push(format!("adapter.rank = {rank} must lie in 1..={min_d}"));
                }
            }
            Self::Dtl { .. } | Self::DtlPlus { .. } => {
                let c = self.csn_config().expect("side-network spec");
                if let Err(Error::Config(items)) = csn::check_backbone::<f64>(&c, cfg) {
                    problems.extend(items);
                }
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(warnings)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Closed-form trainable-parameter count; the head is reported separately.
    pub fn count(&self, cfg: &ViTConfig, n_classes: usize) -> ParamCount {
        let w = block_widths(cfg);
        let df = cfg.final_dim();
        let adapter = match self {
            Self::Full => cfg.param_count(),
            Self::Linear => 0,
            Self::BitFit => {
                let blocks: usize = w.iter().map(|d| (6 + cfg.mlp_ratio) * d).sum();
                let stages: usize = cfg.stages.iter().map(|s| s.dim).sum();
                blocks + cfg.dim + df + stages
            }
            Self::Vpt { mode: VptMode::Shallow, prompts } => prompts * cfg.dim,
            Self::Vpt { mode: VptMode::Deep, prompts } => w.iter().map(|d| prompts * d).sum(),
            Self::Adapter { d_prime } => w.iter().map(|d| 4 * d * d_prime).sum(),
            Self::AdaptFormer { d_prime, .. } => w.iter().map(|d| 2 * d * d_prime).sum(),
            Self::Ssf => 2 * cfg.dim + w.iter().map(|d| 8 * d).sum::<usize>() + 2 * df,
            Self::LoRA { rank } => w.iter().map(|d| 4 * d * rank).sum(),
            Self::Dtl { .. } | Self::DtlPlus { .. } => self.csn_config().expect("side-network spec").param_count(&w),
        };
        ParamCount { adapter, head: df * n_classes + n_classes }
    }

    /// Number of inserted (or, for BitFit, selected) atomic modules.
    pub fn census(&self, cfg: &ViTConfig) -> UnitCensus {
        let n = cfg.depth;
        let (in_block, extra) = match self {
            Self::Full | Self::Linear => (0, 0),
            Self::BitFit => (7 * n, 2 + cfg.stages.len()),
            Self::Vpt { mode: VptMode::Shallow, .. } => (0, 1),
            Self::Vpt { mode: VptMode::Deep, .. } => (n, 0),
            Self::Adapter { .. } => (2 * n, 0),
            Self::AdaptFormer { .. } => (n, 0),
            Self::Ssf => (4 * n, 2),
            Self::LoRA { .. } => (2 * n, 0),
            Self::Dtl { .. } => (n, 0),
            Self::DtlPlus { .. } => (n, 1),
        };
        UnitCensus { in_block, total: in_block + extra }
    }

    /// Blocks at the front whose computation does not depend on any
    /// trainable parameter, so their outputs can be cached or shared.
    pub fn frozen_prefix(&self, cfg: &ViTConfig) -> usize {
        match self {
            Self::Linear => cfg.depth,
            Self::Dtl { m, .. } | Self::DtlPlus { m, .. } => m.saturating_sub(1).min(cfg.depth),
            _ => 0,
        }
    }
}

fn block_widths(cfg: &ViTConfig) -> Vec<usize> {
    (1..=cfg.depth).map(|i| cfg.dim_at(i)).collect()
}

fn param<T: Element>(g: &mut Graph<T>, p: &dyn ParamLookup<T>, name: &str) -> Result<Var> {
    g.param(p, name)
}

/// `X·W + X·A·B`, the low-rank path associated as `(X·A)·B`.
pub fn lora_linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, a: Var, b: Var) -> Result<Var> {
    let (d, r) = (g.shape(a)[0], g.shape(a)[1]);
    if r > d {
        return Err(shape_err("lora_linear", format!("rank {r} exceeds width {d}")));
    }
    let base = g.matmul(x, w)?;
    let delta = g.low_rank(x, a, b)?;
    g.add(base, delta)
}

/// `Θ(X·W_down)·W_up` with GELU.
pub fn bottleneck<T: Element>(g: &mut Graph<T>, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = g.matmul(x, down)?;
    let h = g.gelu(h)?;
    g.matmul(h, up)
}

/// `X + Θ(X·W_down)·W_up`
pub fn adapter_serial<T: Element>(g: &mut Graph<T>, x: Var, down: Var, up: Var) -> Result<Var> {
    let b = bottleneck(g, x, down, up)?;
    g.add(x, b)
}

/// `s·Θ(X·W_down)·W_up`, the branch added next to the FFN.
pub fn adaptformer_branch<T: Element>(g: &mut Graph<T>, x: Var, down: Var, up: Var, s: f64) -> Result<Var> {
    let b = bottleneck(g, x, down, up)?;
    g.scale(b, s)
}

/// `γ ⊙ X + β`
pub fn ssf_transform<T: Element>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let y = g.mul(x, gamma)?;
    g.add(y, beta)
}

/// `[P, X]` with `P [l, d]` repeated over the batch.
pub fn vpt_prepend<T: Element>(g: &mut Graph<T>, x: Var, prompts: Var) -> Result<Var> {
    let batch = g.shape(x)[0];
    let p = g.broadcast(prompts, batch)?;
    g.concat_tokens(&[p, x])
}

pub fn vpt_name(mode: VptMode, i: usize) -> String {
    match mode {
        VptMode::Shallow => "vpt.prompts".into(),
        VptMode::Deep => format!("vpt.{i}.prompts"),
    }
}

fn ssf<T: Element>(g: &mut Graph<T>, p: &dyn ParamLookup<T>, x: Var, point: &str) -> Result<Var> {
    let gamma = param(g, p, &format!("ssf.{point}.gamma"))?;
    let beta = param(g, p, &format!("ssf.{point}.beta"))?;
    ssf_transform(g, x, gamma, beta)
}

impl<T: Element> BlockHooks<T> for AdapterSpec {
    fn extra_tokens(&self) -> usize {
        match self {
            Self::Vpt { prompts, .. } => *prompts,
            _ => 0,
        }
    }

    fn before_block(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, z: Var) -> Result<Var> {
        let Self::Vpt { mode, prompts } = *self else { return Ok(z) };
        if i == 1 {
            let pv = param(g, p, &vpt_name(mode, 1))?;
            return vpt_prepend(g, z, pv);
        }
        if mode == VptMode::Shallow {
            return Ok(z);
        }
        let t = g.shape(z)[1];
        let rest = g.slice_tokens(z, prompts, t - prompts)?;
        let pv = param(g, p, &vpt_name(mode, i))?;
        vpt_prepend(g, rest, pv)
    }

    fn proj_delta(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, which: Proj, x: Var) -> Result<Option<Var>> {
        let Self::LoRA { .. } = self else { return Ok(None) };
        let tag = if which == Proj::Query { "q" } else { "v" };
        let a = param(g, p, &format!("lora.{i}.{tag}.a"))?;
        let b = param(g, p, &format!("lora.{i}.{tag}.b"))?;
        g.low_rank(x, a, b).map(Some)
    }

    fn after_ln(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, which: usize, y: Var) -> Result<Var> {
        match self {
            Self::Ssf => ssf(g, p, y, &format!("{i}.ln{which}")),
            _ => Ok(y),
        }
    }

    fn after_attn(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, y: Var) -> Result<Var> {
        match self {
            Self::Ssf => ssf(g, p, y, &format!("{i}.attn")),
            Self::Adapter { .. } => {
                let down = param(g, p, &format!("adapter.{i}.attn.down"))?;
                let up = param(g, p, &format!("adapter.{i}.attn.up"))?;
                adapter_serial(g, y, down, up)
            }
            _ => Ok(y),
        }
    }

    fn after_ffn(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, y: Var) -> Result<Var> {
        match self {
            Self::Ssf => ssf(g, p, y, &format!("{i}.ffn")),
            Self::Adapter { .. } => {
                let down = param(g, p, &format!("adapter.{i}.ffn.down"))?;
                let up = param(g, p, &format!("adapter.{i}.ffn.up"))?;
                adapter_serial(g, y, down, up)
            }
            _ => Ok(y),
        }
    }

    fn ffn_parallel(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, x: Var) -> Result<Option<Var>> {
        let Self::AdaptFormer { scale, .. } = *self else { return Ok(None) };
        let down = param(g, p, &format!("adaptformer.{i}.down"))?;
        let up = param(g, p, &format!("adaptformer.{i}.up"))?;
        adaptformer_branch(g, x, down, up, scale).map(Some)
    }
}

/// Newly created parameters for `spec` (adapter plus head), all trainable.
pub fn adapter_params<T: Element>(spec: &AdapterSpec, cfg: &ViTConfig, n_classes: usize, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
    let mut out = ParamStore::new();
    let mut add = |name: String, tensor: Tensor<T>, role: ParamRole| {
        let mut p = Param::new(name, tensor, role);
        p.trainable = true;
        out.insert(p);
    };
    let widths = block_widths(cfg);
    let bound = |d: usize| 1.0 / (d as f64).sqrt();
    match spec {
        AdapterSpec::Full | AdapterSpec::Linear | AdapterSpec::BitFit => {}
        AdapterSpec::Vpt { mode, prompts } => {
            let count = if *mode == VptMode::Deep { cfg.depth } else { 1 };
            for i in 1..=count {
                let d = widths[i - 1];
                add(vpt_name(*mode, i), uniform(&mut rng, &[*prompts, d], bound(d)), ParamRole::Embedding);
            }
        }
        AdapterSpec::Adapter { d_prime } => {
            for (idx, &d) in widths.iter().enumerate() {
                for site in ["attn", "ffn"] {
                    let pre = format!("adapter.{}.{site}", idx + 1);
                    add(format!("{pre}.down"), uniform(&mut rng, &[d, *d_prime], bound(d)), ParamRole::Weight);
                    add(format!("{pre}.up"), Tensor::zeros(&[*d_prime, d]), ParamRole::Weight);
                }
            }
        }
        AdapterSpec::AdaptFormer { d_prime, .. } => {
            for (idx, &d) in widths.iter().enumerate() {
                let pre = format!("adaptformer.{}", idx + 1);
                add(format!("{pre}.down"), uniform(&mut rng, &[d, *d_prime], bound(d)), ParamRole::Weight);
                add(format!("{pre}.up"), Tensor::zeros(&[*d_prime, d]), ParamRole::Weight);
            }
        }
        AdapterSpec::Ssf => {
            let mut points = vec![("embed".to_string(), cfg.dim)];
            for (idx, &d) in widths.iter().enumerate() {
                for site in ["ln1", "attn", "ln2", "ffn"] {
                    points.push((format!("{}.{site}", idx + 1), d));
                }
            }
            points.push(("norm".into(), cfg.final_dim()));
            for (point, d) in points {
                add(format!("ssf.{point}.gamma"), Tensor::full(&[d], T::one()), ParamRole::NormScale);
                add(format!("ssf.{point}.beta"), Tensor::zeros(&[d]), ParamRole::NormShift);
            }
        }
        AdapterSpec::LoRA { rank } => {
            for (idx, &d) in widths.iter().enumerate() {
                for tag in ["q", "v"] {
                    let pre = format!("lora.{}.{tag}", idx + 1);
                    add(format!("{pre}.a"), uniform(&mut rng, &[d, *rank], bound(d)), ParamRole::Weight);
                    add(format!("{pre}.b"), Tensor::zeros(&[*rank, d]), ParamRole::Weight);
                }
            }
        }
        AdapterSpec::Dtl { .. } | AdapterSpec::DtlPlus { .. } => {
            let c = spec.csn_config().expect("side-network spec");
            out.extend(csn::csn_init(&c, &widths, rng.random::<u64>()));
        }
    }
    let df = cfg.final_dim();
    let mut head = Param::new("head.w", uniform(&mut rng, &[df, n_classes], bound(df)), ParamRole::Weight);
    head.trainable = true;
    out.insert(head);
    let mut hb = Param::new("head.b", Tensor::zeros(&[n_classes]), ParamRole::Bias);
    hb.trainable = true;
    out.insert(hb);
    out
}

/// Streams produced by the frozen prefix for one batch.
#[derive(Debug, Clone)]
pub struct Prefix<T> {
    /// Streams that entered blocks `1..=P` (kept only when the side network reads them).
    pub inputs: Vec<Tensor<T>>,
    /// Stream entering block `P + 1`.
    pub stream: Tensor<T>,
}

impl<T: Element> Prefix<T> {
    /// Splits a batched prefix into per-sample prefixes.
    pub fn split(&self) -> Vec<Prefix<T>> {
        let b = self.stream.shape()[0];
        (0..b)
            .map(|i| Prefix {
                inputs: self.inputs.iter().map(|t| t.batch_item(i)).collect(),
                stream: self.stream.batch_item(i),
            })
            .collect()
    }

    /// Stacks per-sample prefixes back into a batch.
    pub fn stack(items: &[&Prefix<T>]) -> Result<Prefix<T>> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let inputs = (0..first.inputs.len())
            .map(|k| Tensor::stack(&items.iter().map(|p| &p.inputs[k]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let stream = Tensor::stack(&items.iter().map(|p| &p.stream).collect::<Vec<_>>())?;
        Ok(Prefix { inputs, stream })
    }

    pub fn nbytes(&self) -> usize {
        self.inputs.iter().map(Tensor::nbytes).sum::<usize>() + self.stream.nbytes()
    }
}

/// A frozen backbone with one strategy attached.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T> {
    pub vit: ViTConfig,
    pub spec: AdapterSpec,
    pub n_classes: usize,
    /// Backbone, adapter and head parameters with their trainable flags.
    pub params: ParamStore<T>,
    pub warnings: Vec<String>,
}

/// Marks trainable parameters and wires in `spec`. Invalid hyperparameters
/// are rejected here, before any training step.
pub fn attach<T: Element>(spec: &AdapterSpec, backbone: &ViT<T>, n_classes: usize, seed: u64) -> Result<AdaptedModel<T>> {
    let cfg = &backbone.config;
    let warnings = spec.validate(cfg)?;
    if n_classes == 0 {
        return Err(Error::Config(vec!["data.n_classes must be at least 1".into()]));
    }
    let mut params = backbone.params.clone();
    for p in params.iter_mut() {
        p.trainable = match spec {
            AdapterSpec::Full => true,
            AdapterSpec::BitFit => p.is_bias_like(),
            _ => false,
        };
    }
    params.extend(adapter_params(spec, cfg, n_classes, seed));
    Ok(AdaptedModel { vit: cfg.clone(), spec: spec.clone(), n_classes, params, warnings })
}

impl<T: Element> AdaptedModel<T> {
    pub fn frozen_prefix(&self) -> usize {
        self.spec.frozen_prefix(&self.vit)
    }

    /// Index of the cls token in the stream.
    fn cls_index(&self) -> usize {
        <AdapterSpec as BlockHooks<T>>::extra_tokens(&self.spec)
    }

    /// Logits for a batch of images.
    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<Var> {
        self.forward_with(g, &self.params, images)
    }

    /// Logits, resolving parameters from `p` instead of the model's own store.
    pub fn forward_with(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, images: &Tensor<T>) -> Result<Var> {
        let mut z = embed(g, &self.vit, p, images)?;
        if self.spec == AdapterSpec::Ssf {
            g.push_scope("embed");
            let out = ssf(g, p, z, "embed");
            g.pop_scope();
            z = out?;
        }
        self.suffix(g, p, &[], z)
    }

    /// Runs blocks `1..=P` for P = [`Self::frozen_prefix`] on an inference graph.
    pub fn run_prefix(&self, p: &dyn ParamLookup<T>, images: &Tensor<T>) -> Result<Prefix<T>> {
        self.run_prefix_on(&mut Graph::inference(), p, images)
    }

    /// [`Self::run_prefix`] on a caller-supplied graph.
    pub fn run_prefix_on(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, images: &Tensor<T>) -> Result<Prefix<T>> {
        let depth = self.frozen_prefix();
        if depth == 0 {
            return Err(Error::Config(vec![format!("{} has no frozen prefix to cache", self.spec.name())]));
        }
        let keep_inputs = self.spec.csn_config().is_some();
        let mut z = embed(g, &self.vit, p, images)?;
        let mut inputs = Vec::new();
        for i in 1..=depth {
            if let Some(projected) = stage_transition(g, &self.vit, p, i, z)? {
                z = projected;
            }
            if keep_inputs {
                inputs.push(g.value(z).clone());
            }
            z = block_forward(g, &self.vit, p, &self.spec, i, z)?;
        }
        Ok(Prefix { inputs, stream: g.value(z).clone() })
    }

    /// Logits from a cached prefix.
    pub fn forward_from(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, prefix: &Prefix<T>) -> Result<Var> {
        g.push_scope("prefix");
        let inputs: Vec<Var> = prefix.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let z = g.constant(prefix.stream.clone());
        g.pop_scope();
        let start = self.frozen_prefix() + 1;
        if self.spec.csn_config().is_none() {
            return self.blocks_from(g, p, start, z);
        }
        self.suffix(g, p, &inputs, z)
    }

    fn suffix(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, prefix_inputs: &[Var], z: Var) -> Result<Var> {
        match self.spec.csn_config() {
            Some(c) => {
                let trace = csn::dtl_blocks(g, &self.vit, p, &c, prefix_inputs, z)?;
                self.head(g, p, trace.out)
            }
            None => self.blocks_from(g, p, prefix_inputs.len() + 1, z),
        }
    }

    fn blocks_from(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, start: usize, z: Var) -> Result<Var> {
        let mut z = z;
        for i in start..=self.vit.depth {
            if let Some(projected) = stage_transition(g, &self.vit, p, i, z)? {
                z = projected;
            }
            z = self.spec.before_block(g, p, i, z)?;
            z = block_forward(g, &self.vit, p, &self.spec, i, z)?;
        }
        self.head(g, p, z)
    }

    fn head(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, z: Var) -> Result<Var> {
        let mut feat = pooled_features(g, &self.vit, p, z, self.cls_index())?;
        g.push_scope("head");
        let out = (|| -> Result<Var> {
            if self.spec == AdapterSpec::Ssf {
                feat = ssf(g, p, feat, "norm")?;
            }
            let w = param(g, p, "head.w")?;
            let b = param(g, p, "head.b")?;
            let logits = g.matmul(feat, w)?;
            g.add(logits, b)
        })();
        g.pop_scope();
        out
    }

    /// Trainable parameters outside the head, enumerated from the store.
    pub fn enumerate_trainable(&self) -> ParamCount {
        let mut c = ParamCount { adapter: 0, head: 0 };
        for p in self.params.trainable() {
            if p.name.starts_with("head.") {
                c.head += p.tensor.numel();
            } else {
                c.adapter += p.tensor.numel();
            }
        }
        c
    }

    /// Parameters that are not part of the frozen backbone (adapter and head).
    pub fn task_params(&self) -> ParamStore<T> {
        let names = ViT::<T>::expected_names(&self.vit);
        let mut out = ParamStore::new();
        for p in self.params.iter() {
            if !names.contains(&p.name) {
                out.insert(p.clone());
            }
        }
        out
    }
}
