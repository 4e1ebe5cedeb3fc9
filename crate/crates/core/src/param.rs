//! Named parameters and the stores that hold them.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// What a parameter does inside its layer. BitFit selects on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub role: ParamRole,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, role: ParamRole) -> Self {
        Self { name: name.into(), tensor, trainable: false, role }
    }

    pub fn is_bias_like(&self) -> bool {
        matches!(self.role, ParamRole::Bias | ParamRole::NormShift)
    }
}

/// Anything parameters can be resolved from by name.
pub trait ParamLookup<T> {
    fn lookup(&self, name: &str) -> Option<&Param<T>>;
}

/// Insertion-ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, param: Param<T>) {
        self.params.insert(param.name.clone(), param);
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: ParamRole) {
        self.insert(Param::new(name, tensor, role));
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.tensor).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.iter().filter(|p| p.trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|p| p.name.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.trainable().map(|p| p.tensor.numel()).sum()
    }

    pub fn nbytes(&self) -> usize {
        self.iter().map(|p| p.tensor.nbytes()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.iter_mut() {
            p.trainable = trainable;
        }
    }

    /// Parameters whose name starts with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        for p in other.params.into_values() {
            self.insert(p);
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in self.iter() {
            out.insert(Param { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable, role: p.role });
        }
        out
    }

    /// Bitwise comparison of values (trainable flags ignored).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.iter().all(|p| other.get(&p.name).is_some_and(|q| p.tensor.bit_eq(&q.tensor)))
    }
}

impl<T: Element> ParamLookup<T> for ParamStore<T> {
    fn lookup(&self, name: &str) -> Option<&Param<T>> {
        self.get(name)
    }
}

/// Resolves from `top` first, then `base`. Used to run task-specific
/// parameters against a shared frozen backbone without copying it.
pub struct Layered<'a, T> {
    pub top: &'a ParamStore<T>,
    pub base: &'a ParamStore<T>,
}

impl<T: Element> ParamLookup<T> for Layered<'_, T> {
    fn lookup(&self, name: &str) -> Option<&Param<T>> {
        self.top.get(name).or_else(|| self.base.get(name))
    }
}

/// Tensor with entries drawn from the open interval (−bound, bound), checked
/// after rounding to `T`.
pub fn uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    if bound <= 0.0 {
        return Tensor::zeros(shape);
    }
    let limit = T::lit(bound);
    let data = (0..numel)
        .map(|_| loop {
            let x = T::lit(rng.random_range(-bound..bound));
            if x.abs() < limit {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}
