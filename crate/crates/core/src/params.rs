//! Named parameter registry and its binding into a graph.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Which learning rate a parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone, heads, prompts, adapters.
    Encoder,
    /// Bias proxies, class prompts, accumulator weights.
    Proxy,
}

#[derive(Clone, Debug)]
pub struct Param<E: Element = f32> {
    pub value: Tensor<E>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Every tensor of a model, enumerated once under a stable dotted name.
/// Iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    params: IndexMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>, group: ParamGroup) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: false,
                group,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<E>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<E>> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, on: bool) -> Result<()> {
        self.get_mut(name)
            .map(|p| p.trainable = on)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// A graph under construction plus the parameter leaves bound into it.
/// Each name becomes exactly one leaf, however often it is used.
pub struct Binder<E: Element = f32> {
    pub graph: Graph<E>,
    bound: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<E: Element> Binder<E> {
    pub fn new(grad_enabled: bool) -> Self {
        Binder {
            graph: Graph::new(),
            bound: HashMap::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Leaf for a registry parameter; trainable parameters require gradients.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self
            .graph
            .leaf(p.value.clone(), self.grad_enabled && p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf for a tensor held outside the registry (class prompts, proxy state).
    pub fn bind(&mut self, name: &str, value: &Tensor<E>, trainable: bool) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self
            .graph
            .leaf(value.clone(), self.grad_enabled && trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Routes every later lookup of `name` to `var`.
    pub fn substitute(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn grad(&self, name: &str) -> Option<&[E]> {
        self.bound.get(name).and_then(|v| self.graph.grad(*v))
    }
}
