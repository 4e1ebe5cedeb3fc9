//! Fine-tuning loop and evaluation.
//!
//! When a strategy leaves blocks `1..=P` frozen and untouched, their output is
//! computed once per split and the loop only runs the suffix.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::data::{gather_rows, Dataset, Split};
use crate::error::{Error, Result};
use crate::manifest::{load_weights, save_weights};
use crate::optim::{adamw_step, cosine_lr, AdamState, TrainConfig};
use crate::param::ParamStore;
use crate::petl::{AdaptedModel, AdapterSpec, Prefix};
use crate::report::to_csv;
use crate::tensor::{Element, Tensor};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.epochs)
    }

    pub fn final_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Where to write the best-accuracy weights.
    pub checkpoint: Option<&'a Path>,
    /// Poisons the inputs of this optimizer step with a NaN.
    pub inject_nan_at_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: History,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub best_params: ParamStore<T>,
}

/// Parameters a checkpoint must hold to restore `model`: everything when the
/// strategy edits backbone tensors, otherwise only adapter and head.
pub fn checkpoint_params<T: Element>(model: &AdaptedModel<T>) -> ParamStore<T> {
    match model.spec {
        AdapterSpec::Full | AdapterSpec::BitFit => model.params.clone(),
        _ => model.task_params(),
    }
}

/// Restores weights written by [`train`] into `model`. Returns the loader's
/// warnings about entries the model does not use.
pub fn load_checkpoint<T: Element>(model: &mut AdaptedModel<T>, path: &Path, strict: bool) -> Result<Vec<String>> {
    let mut target = checkpoint_params(model);
    let warnings = load_weights(&mut target, path, strict)?;
    for p in target.iter() {
        model.params.get_mut(&p.name).expect("checkpoint names come from the model").tensor = p.tensor.clone();
    }
    Ok(warnings)
}

/// Split inputs, with the frozen prefix already applied when there is one.
enum Inputs<T> {
    Images(Tensor<T>),
    Cached(Prefix<T>),
}

impl<T: Element> Inputs<T> {
    fn prepare(model: &AdaptedModel<T>, split: &Split<T>) -> Result<Self> {
        if model.frozen_prefix() == 0 {
            return Ok(Self::Images(split.images.clone()));
        }
        let n = split.len();
        let chunks = (0..n)
            .step_by(CHUNK)
            .map(|s| model.run_prefix(&model.params, &split.gather(&(s..(s + CHUNK).min(n)).collect::<Vec<_>>())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Cached(Prefix::stack(&chunks.iter().collect::<Vec<_>>())?))
    }

    fn logits(&self, model: &AdaptedModel<T>, g: &mut Graph<T>, idx: &[usize], poison: bool) -> Result<Var> {
        match self {
            Self::Images(images) => {
                let mut x = gather_rows(images, idx);
                if poison {
                    x.data_mut()[0] = T::nan();
                }
                model.forward(g, &x)
            }
            Self::Cached(prefix) => {
                let mut batch = Prefix {
                    inputs: prefix.inputs.iter().map(|t| gather_rows(t, idx)).collect(),
                    stream: gather_rows(&prefix.stream, idx),
                };
                if poison {
                    batch.stream.data_mut()[0] = T::nan();
                }
                model.forward_from(g, &model.params, &batch)
            }
        }
    }
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy<T: Element>(model: &AdaptedModel<T>, inputs: &Inputs<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    let mut correct = 0;
    for s in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
        let mut g = Graph::inference();
        let logits = inputs.logits(model, &mut g, &idx, false)?;
        let k = model.n_classes;
        for (row, &i) in g.value(logits).data().chunks(k).zip(&idx) {
            correct += usize::from(argmax(row) == labels[i]);
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Top-1 accuracy on `split`, recorded without gradients.
pub fn evaluate<T: Element>(model: &AdaptedModel<T>, split: &Split<T>) -> Result<f64> {
    accuracy(model, &Inputs::prepare(model, split)?, &split.labels)
}

/// Trains the trainable parameters of `model` in place with AdamW. The same
/// seed gives the same history and weights.
pub fn train<T: Element>(
    model: &mut AdaptedModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.n_classes != model.n_classes {
        return Err(Error::Config(vec![format!(
            "data.n_classes ({}) does not match the head ({})",
            data.n_classes, model.n_classes
        )]));
    }
    let train_in = Inputs::prepare(model, &data.train)?;
    let test_in = Inputs::prepare(model, &data.test)?;
    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_max;
        for idx in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let mut g = Graph::train();
            let logits = train_in.logits(model, &mut g, idx, opts.inject_nan_at_step == Some(step))?;
            let loss = g.cross_entropy(logits, &labels)?;
            let loss_value = g.value(loss).item().as_f64();
            let grads = g.backward(loss)?;
            drop(g);
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg)?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { param: "loss".into() });
            }
            loss_sum += loss_value * idx.len() as f64;
            step += 1;
        }
        let test_acc = accuracy(model, &test_in, &data.test.labels)?;
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / n as f64, test_acc, lr });
        if best.as_ref().is_none_or(|(acc, _, _)| test_acc > *acc) {
            best = Some((test_acc, epoch, checkpoint_params(model)));
        }
    }
    let (best_acc, best_epoch, best_params) = best.expect("epochs >= 1");
    if let Some(path) = opts.checkpoint {
        save_weights(&best_params, path)?;
    }
    Ok(TrainOutcome { history, best_acc, best_epoch, best_params })
}
