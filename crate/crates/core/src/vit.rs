//! Toy pre-LN vision transformer.
//!
//! Parameter names are hierarchical and blocks are numbered from 1, so block
//! `i` owns `block.{i}.*` and maps `zᵢ` to `zᵢ₊₁`. The classification head is
//! not part of the backbone; adapted models add their own `head.*`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::param::{uniform, ParamLookup, ParamRole, ParamStore};
use crate::tensor::{Element, Tensor};

/// Width change at the start of a block. The stream is projected by a frozen
/// `stage.{k}.proj` before block `start` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub start: usize,
    pub dim: usize,
}

fn default_channels() -> usize {
    3
}

fn default_ln_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub img: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ViTConfig {
    /// N=12, d=64, 4 heads, 32×32 images in 8×8 patches.
    pub fn toy() -> Self {
        Self { depth: 12, dim: 64, heads: 4, img: 32, patch: 8, mlp_ratio: 4, channels: 3, stages: Vec::new(), ln_eps: 1e-6 }
    }

    /// Two blocks, d=8, 8×8 images in 4×4 patches (5 tokens).
    pub fn micro() -> Self {
        Self { depth: 2, dim: 8, heads: 2, img: 8, patch: 4, mlp_ratio: 2, channels: 3, stages: Vec::new(), ln_eps: 1e-6 }
    }

    /// ViT-B/16 shape at 224², used only for closed-form counting.
    pub fn base() -> Self {
        Self { depth: 12, dim: 768, heads: 12, img: 224, patch: 16, mlp_ratio: 4, channels: 3, stages: Vec::new(), ln_eps: 1e-6 }
    }

    pub fn grid_side(&self) -> usize {
        self.img / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Width of the stream entering block `i` (after any stage projection).
    pub fn dim_at(&self, i: usize) -> usize {
        self.stages.iter().rfind(|s| s.start <= i).map_or(self.dim, |s| s.dim)
    }

    pub fn final_dim(&self) -> usize {
        self.dim_at(self.depth)
    }

    /// Index of the stage starting at block `i`, if any.
    pub fn stage_starting_at(&self, i: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.start == i)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("model.depth must be at least 1".to_string());
        }
        if self.patch == 0 || self.img == 0 || !self.img.is_multiple_of(self.patch) {
            problems.push(format!("model.img ({}) must be a positive multiple of model.patch ({})", self.img, self.patch));
        }
        if self.heads == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            problems.push("model.heads, model.mlp_ratio and model.channels must be positive".to_string());
        }
        if !(self.ln_eps > 0.0) {
            problems.push("model.ln_eps must be positive".to_string());
        }
        let mut prev = 1;
        for (k, s) in self.stages.iter().enumerate() {
            if s.start <= prev || s.start > self.depth {
                problems.push(format!("model.stages[{k}].start ({}) must increase and lie in 2..={}", s.start, self.depth));
            }
            prev = s.start;
        }
        let mut dims = vec![self.dim];
        dims.extend(self.stages.iter().map(|s| s.dim));
        for d in dims {
            if d == 0 || self.heads == 0 || d % self.heads != 0 {
                problems.push(format!("width {d} is not divisible by model.heads ({})", self.heads));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Closed-form backbone parameter count (no head).
    pub fn param_count(&self) -> usize {
        let d0 = self.dim;
        let mut total = self.patch_dim() * d0 + d0 + d0 + self.n_tokens() * d0;
        for i in 1..=self.depth {
            total += block_param_count(self.dim_at(i), self.mlp_ratio);
        }
        let mut prev = d0;
        for s in &self.stages {
            total += prev * s.dim + s.dim;
            prev = s.dim;
        }
        total + 2 * self.final_dim()
    }
}

/// Parameters in one block: two LNs, Q/K/V/O (no key bias), and the FFN.
pub fn block_param_count(d: usize, mlp_ratio: usize) -> usize {
    let hidden = mlp_ratio * d;
    2 * d + 4 * d * d + 3 * d + 2 * d + d * hidden + hidden + hidden * d + d
}

pub struct ViT<T> {
    pub config: ViTConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> ViT<T> {
    /// Random frozen backbone. Linear weights are U(±√(3/fan_in)), biases
    /// U(±0.02), LN gains 1 and shifts 0.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let d0 = config.dim;
        p.add("embed.proj.w", uniform(&mut rng, &[config.patch_dim(), d0], lin(config.patch_dim())), ParamRole::Weight);
        p.add("embed.proj.b", uniform(&mut rng, &[d0], 0.02), ParamRole::Bias);
        p.add("embed.cls", uniform(&mut rng, &[1, d0], 0.5), ParamRole::Embedding);
        p.add("embed.pos", uniform(&mut rng, &[config.n_tokens(), d0], 0.5), ParamRole::Embedding);
        for i in 1..=config.depth {
            if let Some(k) = config.stage_starting_at(i) {
                let (from, to) = (config.dim_at(i - 1), config.stages[k].dim);
                p.add(format!("stage.{k}.proj.w"), uniform(&mut rng, &[from, to], lin(from)), ParamRole::Weight);
                p.add(format!("stage.{k}.proj.b"), uniform(&mut rng, &[to], 0.02), ParamRole::Bias);
            }
            let d = config.dim_at(i);
            let hidden = config.mlp_ratio * d;
            let b = format!("block.{i}");
            p.add(format!("{b}.ln1.gamma"), Tensor::full(&[d], T::one()), ParamRole::NormScale);
            p.add(format!("{b}.ln1.beta"), Tensor::zeros(&[d]), ParamRole::NormShift);
            for proj in ["q", "k", "v", "o"] {
                p.add(format!("{b}.attn.w_{proj}"), uniform(&mut rng, &[d, d], lin(d)), ParamRole::Weight);
                if proj != "k" {
                    p.add(format!("{b}.attn.b_{proj}"), uniform(&mut rng, &[d], 0.02), ParamRole::Bias);
                }
            }
            p.add(format!("{b}.ln2.gamma"), Tensor::full(&[d], T::one()), ParamRole::NormScale);
            p.add(format!("{b}.ln2.beta"), Tensor::zeros(&[d]), ParamRole::NormShift);
            p.add(format!("{b}.ffn.w1"), uniform(&mut rng, &[d, hidden], lin(d)), ParamRole::Weight);
            p.add(format!("{b}.ffn.b1"), uniform(&mut rng, &[hidden], 0.02), ParamRole::Bias);
            p.add(format!("{b}.ffn.w2"), uniform(&mut rng, &[hidden, d], lin(hidden)), ParamRole::Weight);
            p.add(format!("{b}.ffn.b2"), uniform(&mut rng, &[d], 0.02), ParamRole::Bias);
        }
        let df = config.final_dim();
        p.add("norm.gamma", Tensor::full(&[df], T::one()), ParamRole::NormScale);
        p.add("norm.beta", Tensor::zeros(&[df]), ParamRole::NormShift);
        Ok(Self { config, params: p })
    }

    /// Every backbone parameter name the config implies, in init order.
    pub fn expected_names(config: &ViTConfig) -> Vec<String> {
        let mut names: Vec<String> =
            ["embed.proj.w", "embed.proj.b", "embed.cls", "embed.pos"].iter().map(|s| s.to_string()).collect();
        for i in 1..=config.depth {
            if let Some(k) = config.stage_starting_at(i) {
                names.push(format!("stage.{k}.proj.w"));
                names.push(format!("stage.{k}.proj.b"));
            }
            for suffix in [
                "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.w_v", "attn.b_v", "attn.w_o",
                "attn.b_o", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
            ] {
                names.push(format!("block.{i}.{suffix}"));
            }
        }
        names.push("norm.gamma".into());
        names.push("norm.beta".into());
        names
    }
}

/// Cuts `[B, C, img, img]` (or a single `[C, img, img]`) into
/// `[B, n_patches, C·p·p]`, patches in raster order, features ordered (c, y, x).
pub fn patchify<T: Element>(cfg: &ViTConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape();
    let (b, c, h, w) = match *s {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(shape_err("patch_embed", format!("expected [B, C, H, W] images, got {s:?}"))),
    };
    if c != cfg.channels || h != cfg.img || w != cfg.img {
        return Err(shape_err(
            "patch_embed",
            format!("image {c}×{h}×{w} does not match config {}×{}×{}", cfg.channels, cfg.img, cfg.img),
        ));
    }
    if !cfg.img.is_multiple_of(cfg.patch) {
        return Err(shape_err("patch_embed", format!("img {} not divisible by patch {}", cfg.img, cfg.patch)));
    }
    let (p, g) = (cfg.patch, cfg.grid_side());
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ch) * h + gy * p + y) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, cfg.patch_dim()], out)
}

/// `z₁`: projected patches with the cls token in front, plus positions.
pub fn embed<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    params: &dyn ParamLookup<T>,
    images: &Tensor<T>,
) -> Result<Var> {
    let patches = patchify(cfg, images)?;
    let batch = patches.shape()[0];
    g.push_scope("embed");
    let x = g.constant(patches);
    let w = g.param(params, "embed.proj.w")?;
    let b = g.param(params, "embed.proj.b")?;
    let cls = g.param(params, "embed.cls")?;
    let pos = g.param(params, "embed.pos")?;
    let proj = g.matmul(x, w)?;
    let proj = g.add(proj, b)?;
    let cls = g.broadcast(cls, batch)?;
    let tokens = g.concat_tokens(&[cls, proj])?;
    let z = g.add(tokens, pos)?;
    g.pop_scope();
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Query,
    Value,
}

/// Extension points inside a block. Every default is a no-op, so an empty
/// implementation runs the plain backbone.
pub trait BlockHooks<T: Element> {
    /// Extra tokens carried by the stream (prompts).
    fn extra_tokens(&self) -> usize {
        0
    }

    /// Runs on the stream before block `i`.
    fn before_block(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, z: Var) -> Result<Var> {
        Ok(z)
    }

    /// Added to the query or value projection of the normalised input.
    fn proj_delta(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, _which: Proj, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Applied to the output of LN `which` (1 or 2).
    fn after_ln(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, _which: usize, y: Var) -> Result<Var> {
        Ok(y)
    }

    fn after_attn(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, y: Var) -> Result<Var> {
        Ok(y)
    }

    fn after_ffn(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, y: Var) -> Result<Var> {
        Ok(y)
    }

    /// Branch added next to the FFN, fed with the sublayer input.
    fn ffn_parallel(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl<T: Element> BlockHooks<T> for NoHooks {}

fn linear<T: Element>(g: &mut Graph<T>, p: &dyn ParamLookup<T>, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let wv = g.param(p, w)?;
    let y = g.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = g.param(p, b)?;
            g.add(y, bv)
        }
        None => Ok(y),
    }
}

/// `[B, T, d] -> [B, H, T, d/H]`
fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.transpose(r, 1, 2)
}

/// Multi-head self-attention over the normalised input `x`.
fn attention<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &dyn ParamLookup<T>,
    hooks: &dyn BlockHooks<T>,
    i: usize,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let pre = format!("block.{i}.attn");
    let mut q = linear(g, p, x, &format!("{pre}.w_q"), Some(&format!("{pre}.b_q")))?;
    if let Some(dq) = hooks.proj_delta(g, p, i, Proj::Query, x)? {
        q = g.add(q, dq)?;
    }
    let k = linear(g, p, x, &format!("{pre}.w_k"), None)?;
    let mut v = linear(g, p, x, &format!("{pre}.w_v"), Some(&format!("{pre}.b_v")))?;
    if let Some(dv) = hooks.proj_delta(g, p, i, Proj::Value, x)? {
        v = g.add(v, dv)?;
    }
    let q = split_heads(g, q, cfg.heads)?;
    let k = split_heads(g, k, cfg.heads)?;
    let v = split_heads(g, v, cfg.heads)?;
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((d / cfg.heads) as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.transpose(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    linear(g, p, ctx, &format!("{pre}.w_o"), Some(&format!("{pre}.b_o")))
}

fn layer_norm<T: Element>(g: &mut Graph<T>, p: &dyn ParamLookup<T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}.gamma"))?;
    let beta = g.param(p, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// One pre-LN block: `z + MHSA(LN₁ z)`, then `+ FFN(LN₂ ·)`.
pub fn block_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &dyn ParamLookup<T>,
    hooks: &dyn BlockHooks<T>,
    i: usize,
    z: Var,
) -> Result<Var> {
    if i == 0 || i > cfg.depth {
        return Err(config_err(format!("block index {i} outside 1..={}", cfg.depth)));
    }
    let s = g.shape(z).to_vec();
    let want = cfg.n_tokens() + hooks.extra_tokens();
    let d = cfg.dim_at(i);
    if s.len() != 3 || s[1] != want || s[2] != d {
        return Err(shape_err("block_forward", format!("block {i} expects [B, {want}, {d}], got {s:?}")));
    }
    g.push_scope(format!("block.{i}"));
    g.count_block_run();
    let out = (|| -> Result<Var> {
        let b = format!("block.{i}");
        let x = layer_norm(g, p, z, &format!("{b}.ln1"), cfg.ln_eps)?;
        let x = hooks.after_ln(g, p, i, 1, x)?;
        let a = attention(g, cfg, p, hooks, i, x)?;
        let a = hooks.after_attn(g, p, i, a)?;
        let z = g.add(z, a)?;
        let x = layer_norm(g, p, z, &format!("{b}.ln2"), cfg.ln_eps)?;
        let x = hooks.after_ln(g, p, i, 2, x)?;
        let h = linear(g, p, x, &format!("{b}.ffn.w1"), Some(&format!("{b}.ffn.b1")))?;
        let h = g.gelu(h)?;
        let f = linear(g, p, h, &format!("{b}.ffn.w2"), Some(&format!("{b}.ffn.b2")))?;
        let f = hooks.after_ffn(g, p, i, f)?;
        let mut out = g.add(z, f)?;
        if let Some(extra) = hooks.ffn_parallel(g, p, i, z)? {
            out = g.add(out, extra)?;
        }
        Ok(out)
    })();
    g.pop_scope();
    let out = out?;
    g.mark_boundary(out);
    Ok(out)
}

/// Frozen projection into a new stage's width, if one starts at block `i`.
pub fn stage_transition<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &dyn ParamLookup<T>,
    i: usize,
    z: Var,
) -> Result<Option<Var>> {
    let Some(k) = cfg.stage_starting_at(i) else { return Ok(None) };
    g.push_scope(format!("stage.{k}"));
    let out = linear(g, p, z, &format!("stage.{k}.proj.w"), Some(&format!("stage.{k}.proj.b")));
    g.pop_scope();
    out.map(Some)
}

/// Final LN applied to the token at `cls_index`, flattened to `[B, d]`.
pub fn pooled_features<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &dyn ParamLookup<T>,
    z: Var,
    cls_index: usize,
) -> Result<Var> {
    let s = g.shape(z).to_vec();
    g.push_scope("head");
    let out = (|| -> Result<Var> {
        let cls = g.slice_tokens(z, cls_index, 1)?;
        let cls = g.reshape(cls, &[s[0], s[2]])?;
        layer_norm(g, p, cls, "norm", cfg.ln_eps)
    })();
    g.pop_scope();
    out
}

/// Plain backbone forward: final tokens and every block output `z₂ … z_{N+1}`.
pub fn forward_with_taps<T: Element>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &dyn ParamLookup<T>,
    images: &Tensor<T>,
) -> Result<(Var, Vec<Var>)> {
    let mut z = embed(g, cfg, p, images)?;
    let mut taps = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        if let Some(projected) = stage_transition(g, cfg, p, i, z)? {
            z = projected;
        }
        z = block_forward(g, cfg, p, &NoHooks, i, z)?;
        taps.push(z);
    }
    Ok((z, taps))
}
