use std::cell::RefCell;
use std::hash::Hasher;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Role of a parameter; decides weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Token,
    PositionEmbedding,
    PositionBias,
    Adapter,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Adapter)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

pub type GradMap<T> = IndexMap<String, Tensor<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { value, trainable: true, kind });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.clone()).collect()
    }

    pub fn count(&self, trainable_only: bool) -> usize {
        self.params.values().filter(|p| !trainable_only || p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str, &Param<T>) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name, p);
        }
    }

    /// Hash of the raw bits of every parameter accepted by `pred`.
    pub fn checksum(&self, mut pred: impl FnMut(&str, &Param<T>) -> bool) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &self.params {
            if pred(name, p) {
                h.write(name.as_bytes());
                for v in p.value.data() {
                    h.write_u64(v.f64().to_bits());
                }
            }
        }
        h.finish()
    }

    pub fn is_allocated(&self) -> bool {
        self.params.values().all(|p| p.value.is_allocated())
    }
}

/// Lazily registers store parameters as leaves on a graph.
pub struct Binder<'a, T> {
    graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    track_grads: bool,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'a, T: Real> Binder<'a, T> {
    /// With `track_grads`, trainable parameters become gradient-tracked leaves.
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, track_grads: bool) -> Self {
        Self { graph, store, track_grads, bound: RefCell::new(IndexMap::new()) }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let p = self.store.get(name).ok_or_else(|| Error::validation(format!("unknown parameter {name}")))?;
        if !p.value.is_allocated() {
            return Err(Error::validation(format!("parameter {name} has no weights (shape-only model)")));
        }
        let v = self.graph.leaf(&p.value, self.track_grads && p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient entries for trainable parameters touched by the forward pass.
    pub fn collect(&self, grads: &Gradients<T>) -> GradMap<T> {
        let mut out = GradMap::new();
        for (name, &v) in self.bound.borrow().iter() {
            let p = &self.store.get(name).expect("bound params exist").value;
            if !self.graph.requires_grad(v) {
                continue;
            }
            let data = grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]);
            let t = Tensor::new(p.shape().to_vec(), data).expect("gradient matches param shape");
            out.insert(name.clone(), t);
        }
        out
    }
}

/// Reverse-mode gradients of `loss` for the trainable parameters in `binder`.
pub fn grad<T: Real>(loss: Var, binder: &Binder<'_, T>) -> Result<GradMap<T>> {
    let grads = binder.graph().backward(loss)?;
    Ok(binder.collect(&grads))
}
