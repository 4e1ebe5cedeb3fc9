//! Compact side network.
//!
//! A running side state `h` is built from low-rank maps of the stream
//! entering each block, `hᵢ₊₁ = hᵢ + (zᵢ·aᵢ)·cᵢ`, and from block `M` on it is
//! added back to the block output through a sharp Swish gate. The DTL+
//! variant additionally passes the gated state through one depthwise
//! convolution over the patch grid, shared by every block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::param::{uniform, Param, ParamLookup, ParamRole, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vit::{block_forward, stage_transition, NoHooks, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsnVariant {
    Dtl,
    #[serde(rename = "dtl+", alias = "dtlplus")]
    DtlPlus,
}

fn default_beta() -> f64 {
    100.0
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsnConfig {
    pub d_prime: usize,
    /// First block whose output receives the side state (1-based).
    pub m: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub variant: CsnVariant,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl CsnConfig {
    pub fn dtl(d_prime: usize, m: usize) -> Self {
        Self { d_prime, m, beta: 100.0, variant: CsnVariant::Dtl, kernel: 3 }
    }

    pub fn dtl_plus(d_prime: usize, m: usize) -> Self {
        Self { variant: CsnVariant::DtlPlus, ..Self::dtl(d_prime, m) }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.m == 0 || self.m > depth + 1 {
            problems.push(format!("adapter.m = {} outside 1..={}", self.m, depth + 1));
        }
        if self.d_prime == 0 {
            problems.push("adapter.d_prime must be at least 1".to_string());
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            problems.push(format!("adapter.beta must be positive, got {}", self.beta));
        }
        if self.variant == CsnVariant::DtlPlus && self.kernel.is_multiple_of(2) {
            problems.push(format!("adapter.kernel must be odd, got {}", self.kernel));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Closed-form count of side-network parameters for blocks of the given widths.
    pub fn param_count(&self, widths: &[usize]) -> usize {
        let pairs: usize = widths.iter().map(|d| 2 * d * self.d_prime).sum();
        match self.variant {
            CsnVariant::Dtl => pairs,
            CsnVariant::DtlPlus => {
                let d = widths.first().copied().unwrap_or(0);
                pairs + d * self.kernel * self.kernel + d
            }
        }
    }

    /// `(aᵢ, cᵢ)` pairs, plus the shared convolution for DTL+.
    pub fn structural_units(&self, depth: usize) -> usize {
        match self.variant {
            CsnVariant::Dtl => depth,
            CsnVariant::DtlPlus => depth + 1,
        }
    }
}

pub fn a_name(i: usize) -> String {
    format!("csn.{i}.a")
}

pub fn c_name(i: usize) -> String {
    format!("csn.{i}.c")
}

pub const G_KERNEL: &str = "csn.g.kernel";
pub const G_BIAS: &str = "csn.g.bias";

/// `aᵢ ~ U(±1/√d)`, `cᵢ = 0`; for DTL+ the kernel follows the same rule and
/// its bias starts at 0. All returned parameters are trainable.
pub fn csn_init<T: Element>(cfg: &CsnConfig, widths: &[usize], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut add = |name: String, tensor: Tensor<T>, role| {
        let mut param = Param::new(name, tensor, role);
        param.trainable = true;
        p.insert(param);
    };
    for (idx, &d) in widths.iter().enumerate() {
        let bound = 1.0 / (d as f64).sqrt();
        add(a_name(idx + 1), uniform(&mut rng, &[d, cfg.d_prime], bound), ParamRole::Weight);
        add(c_name(idx + 1), Tensor::zeros(&[cfg.d_prime, d]), ParamRole::Weight);
    }
    if cfg.variant == CsnVariant::DtlPlus {
        let d = widths.first().copied().unwrap_or(0);
        let k = cfg.kernel;
        add(G_KERNEL.into(), uniform(&mut rng, &[d, k, k], 1.0 / (d as f64).sqrt()), ParamRole::Weight);
        add(G_BIAS.into(), Tensor::zeros(&[d]), ParamRole::Bias);
    }
    p
}

/// `h + (z·a)·c`, associated so no `d×d` matrix is formed. `h = None` is the
/// zero state.
pub fn csn_step<T: Element>(g: &mut Graph<T>, h: Option<Var>, z: Var, a: Var, c: Var) -> Result<Var> {
    if let Some(h) = h {
        let (hs, zs) = (g.shape(h), g.shape(z));
        if hs.last() != zs.last() {
            return Err(shape_err(
                "csn_step",
                format!("side state {hs:?} and tap {zs:?} differ in width without a declared stage boundary"),
            ));
        }
    }
    let delta = g.low_rank(z, a, c)?;
    match h {
        Some(h) => g.add(h, delta),
        None => Ok(delta),
    }
}

/// Shared DTL+ convolution: patch tokens are laid out on their square grid,
/// convolved depthwise, and put back; the leading cls token passes through.
pub fn conv_patches<T: Element>(g: &mut Graph<T>, x: Var, grid: usize, kernel: Var, bias: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let n = grid * grid;
    if t != n + 1 {
        return Err(shape_err("csn_conv", format!("{t} tokens do not form cls + {grid}×{grid} grid")));
    }
    let cls = g.slice_tokens(x, 0, 1)?;
    let patches = g.slice_tokens(x, 1, n)?;
    let chw = g.transpose(patches, 1, 2)?;
    let chw = g.reshape(chw, &[b, d, grid, grid])?;
    let y = g.depthwise_conv2d(chw, kernel, bias)?;
    let y = g.reshape(y, &[b, d, n])?;
    let y = g.transpose(y, 1, 2)?;
    g.concat_tokens(&[cls, y])
}

/// `z′ᵢ₊₁` from `zᵢ₊₁`. Below `M` the input handle is returned untouched.
pub fn inject<T: Element>(
    g: &mut Graph<T>,
    p: &dyn ParamLookup<T>,
    cfg: &CsnConfig,
    i: usize,
    z_next: Var,
    h_next: Var,
    grid: Option<usize>,
) -> Result<Var> {
    if i < cfg.m {
        return Ok(z_next);
    }
    let gated = g.swish(h_next, cfg.beta)?;
    let side = match cfg.variant {
        CsnVariant::Dtl => gated,
        CsnVariant::DtlPlus => {
            let grid = grid.ok_or_else(|| shape_err("inject", "DTL+ needs a square patch grid"))?;
            let kernel = g.param(p, G_KERNEL)?;
            let bias = g.param(p, G_BIAS)?;
            conv_patches(g, gated, grid, kernel, bias)?
        }
    };
    g.add(z_next, side)
}

/// What the side network needs from a backbone.
pub trait Backbone<T: Element> {
    fn depth(&self) -> usize;

    /// Width of the stream entering block `i`.
    fn width(&self, i: usize) -> usize;

    fn block(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, z: Var) -> Result<Var>;

    /// Projects the stream if a new stage begins at block `i`.
    fn transition(&self, _g: &mut Graph<T>, _p: &dyn ParamLookup<T>, _i: usize, _z: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn is_stage_start(&self, _i: usize) -> bool {
        false
    }

    /// Side of the square patch grid behind one leading cls token.
    fn patch_grid(&self) -> Option<usize> {
        None
    }
}

impl<T: Element> Backbone<T> for ViTConfig {
    fn depth(&self) -> usize {
        self.depth
    }

    fn width(&self, i: usize) -> usize {
        self.dim_at(i)
    }

    fn block(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, z: Var) -> Result<Var> {
        block_forward(g, self, p, &NoHooks, i, z)
    }

    fn transition(&self, g: &mut Graph<T>, p: &dyn ParamLookup<T>, i: usize, z: Var) -> Result<Option<Var>> {
        stage_transition(g, self, p, i, z)
    }

    fn is_stage_start(&self, i: usize) -> bool {
        self.stage_starting_at(i).is_some()
    }

    fn patch_grid(&self) -> Option<usize> {
        Some(self.grid_side())
    }
}

/// Per-block widths of a backbone.
pub fn widths<T: Element>(bb: &dyn Backbone<T>) -> Vec<usize> {
    (1..=bb.depth()).map(|i| bb.width(i)).collect()
}

/// Assembly-time checks that depend on the backbone.
pub fn check_backbone<T: Element>(cfg: &CsnConfig, bb: &dyn Backbone<T>) -> Result<()> {
    cfg.validate(bb.depth())?;
    if cfg.variant == CsnVariant::DtlPlus {
        if bb.patch_grid().is_none() {
            return Err(Error::Config(vec!["DTL+ needs a backbone with a square patch grid".into()]));
        }
        let w = widths(bb);
        if w.iter().any(|&d| d != w[0]) {
            return Err(Error::Config(vec!["DTL+ shares one convolution, so every block must have the same width".into()]));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DtlTrace {
    /// Final adapted stream `z′_{N+1}`.
    pub out: Var,
    /// Stream entering each block (what step `i` read).
    pub inputs: Vec<Var>,
    /// Block outputs before injection, `z₂ … z_{N+1}`.
    pub taps: Vec<Var>,
}

/// Runs the adapted backbone from block `prefix.len() + 1` on.
///
/// `prefix` holds the streams that entered the already-executed blocks
/// `1..=P` (they must all precede `M`), and `z` enters block `P + 1`.
pub fn dtl_blocks<T: Element>(
    g: &mut Graph<T>,
    bb: &dyn Backbone<T>,
    p: &dyn ParamLookup<T>,
    cfg: &CsnConfig,
    prefix: &[Var],
    z: Var,
) -> Result<DtlTrace> {
    let start = prefix.len() + 1;
    if start > cfg.m {
        return Err(shape_err("dtl_forward", format!("a cached prefix of {} blocks reaches past M = {}", prefix.len(), cfg.m)));
    }
    let grid = bb.patch_grid();
    let mut h: Option<Var> = None;
    let mut inputs = Vec::with_capacity(bb.depth());
    g.push_scope("csn");
    for (idx, &zi) in prefix.iter().enumerate() {
        let i = idx + 1;
        if bb.is_stage_start(i) {
            h = None;
        }
        let a = g.param(p, &a_name(i))?;
        let c = g.param(p, &c_name(i))?;
        h = Some(csn_step(g, h, zi, a, c)?);
        inputs.push(zi);
    }
    g.pop_scope();

    let mut z = z;
    let mut taps = Vec::with_capacity(bb.depth());
    for i in start..=bb.depth() {
        if let Some(projected) = bb.transition(g, p, i, z)? {
            z = projected;
            h = None;
        }
        inputs.push(z);
        g.push_scope("csn");
        let a = g.param(p, &a_name(i))?;
        let c = g.param(p, &c_name(i))?;
        let stepped = csn_step(g, h, z, a, c);
        g.pop_scope();
        let h_next = stepped?;
        h = Some(h_next);
        let z_next = bb.block(g, p, i, z)?;
        taps.push(z_next);
        g.push_scope("csn");
        let injected = inject(g, p, cfg, i, z_next, h_next, grid);
        g.pop_scope();
        z = injected?;
    }
    Ok(DtlTrace { out: z, inputs, taps })
}

/// The whole adapted backbone from the stream `z₁`.
pub fn dtl_forward<T: Element>(
    g: &mut Graph<T>,
    bb: &dyn Backbone<T>,
    p: &dyn ParamLookup<T>,
    cfg: &CsnConfig,
    z1: Var,
) -> Result<DtlTrace> {
    dtl_blocks(g, bb, p, cfg, &[], z1)
}
