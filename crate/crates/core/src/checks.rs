//! Finite-difference checks of whole adapted models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, Graph};
use crate::error::Result;
use crate::param::{uniform, ParamStore};
use crate::petl::{attach, AdaptedModel, AdapterSpec, SPEC_NAMES};
use crate::tensor::{Element, Tensor};
use crate::vit::{ViT, ViTConfig};

/// Adds U(±`spread`) to every trainable entry so zero-initialised factors
/// carry gradient and no activation sits exactly on a kink.
pub fn jitter_trainable<T: Element>(params: &mut ParamStore<T>, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let noise: Tensor<T> = uniform(&mut rng, p.tensor.shape(), spread);
        p.tensor.add_assign(&noise);
    }
}

pub fn gaussian_images<T: Element>(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, cfg.channels, cfg.img, cfg.img];
    let data = (0..shape.iter().product()).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Specs covered by [`check_all`] on a backbone of `depth` blocks: every
/// named strategy, with the side networks at M = 1 and M = 2.
pub fn check_specs(depth: usize) -> Vec<(String, AdapterSpec)> {
    let mut out = Vec::new();
    for name in SPEC_NAMES {
        let spec = AdapterSpec::from_name(name, depth).expect("listed name");
        if spec.csn_config().is_some() {
            for m in [1, 2] {
                out.push((format!("{name}@M={m}"), spec.with_m(m)));
            }
        } else {
            out.push((name.to_string(), spec));
        }
    }
    out
}

/// A jittered model on `cfg` with an eight-image cross-entropy loss.
pub fn check_model(spec: &AdapterSpec, cfg: &ViTConfig, seed: u64) -> Result<(AdaptedModel<f64>, Tensor<f64>, Vec<usize>)> {
    let vit = ViT::<f64>::init(cfg.clone(), seed)?;
    let mut model = attach(spec, &vit, 3, seed)?;
    jitter_trainable(&mut model.params, 0.25, seed ^ 0x5eed);
    Ok((model, gaussian_images(cfg, 8, seed ^ 0x1a6e), (0..8).map(|i| i % 3).collect()))
}

pub fn spec_grad_check(spec: &AdapterSpec, cfg: &ViTConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (model, images, labels) = check_model(spec, cfg, seed)?;
    grad_check(
        |g: &mut Graph<f64>, p| {
            let logits = model.forward_with(g, p, &images)?;
            g.cross_entropy(logits, &labels)
        },
        &model.params,
        eps,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub spec: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

pub fn check_all(cfg: &ViTConfig, seed: u64, eps: f64) -> Result<Vec<GradCheckRow>> {
    check_specs(cfg.depth)
        .into_iter()
        .map(|(label, spec)| {
            let r = spec_grad_check(&spec, cfg, seed, eps)?;
            Ok(GradCheckRow {
                spec: label,
                checked: r.checked,
                max_relative_error: r.max_relative_error,
                worst_param: r.worst_param,
                worst_index: r.worst_index,
            })
        })
        .collect()
}
