//! AdamW with decoupled weight decay and a warmup plus cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradStore;
use crate::error::{shape_err, Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            errs.push(format!("train.lr_min ({}) must lie in [0, train.lr_max ({})]", self.lr_min, self.lr_max));
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            errs.push(format!("train.beta1 ({}) must lie in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            errs.push(format!("train.beta2 ({}) must lie in [0, 1)", self.beta2));
        }
        if !(self.eps > 0.0) {
            errs.push(format!("train.eps ({}) must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("train.weight_decay ({}) must be non-negative", self.weight_decay));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total_steps`.
/// Steps past the end stay at `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if step >= total_steps {
        return cfg.lr_min;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    let t = (step - cfg.warmup_steps) as f64;
    let span = (total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t / span).cos())
}

/// First and second moments per trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn nbytes(&self) -> usize {
        self.m.values().chain(self.v.values()).map(Tensor::nbytes).sum()
    }
}

/// One AdamW update of every trainable parameter. Parameters without a
/// gradient are treated as having a zero gradient. Nothing is written if any
/// gradient is non-finite.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for p in params.trainable() {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.tensor.shape() {
                return Err(shape_err("adamw_step", format!("{}: grad {:?} vs param {:?}", p.name, g.shape(), p.tensor.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { param: p.name.clone() });
            }
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(&p.name) {
                if t.shape() != p.tensor.shape() {
                    return Err(shape_err("adamw_step", format!("{}: state {:?} vs param {:?}", p.name, t.shape(), p.tensor.shape())));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for p in params.iter_mut().filter(|p| p.trainable) {
        let shape = p.tensor.shape().to_vec();
        let m = state.m.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let grad = grads.get(&p.name);
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let g = grad.map_or(0.0, |g| g.data()[i].as_f64());
            let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * g;
            let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * g * g;
            m.data_mut()[i] = T::lit(mi);
            v.data_mut()[i] = T::lit(vi);
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            w[i] = T::lit(w[i].as_f64() * decay - step);
        }
    }
    Ok(())
}
