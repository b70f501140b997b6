use std::collections::BTreeMap;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. A tensor registered once and referenced by
/// several components is shared storage: every consumer reads the same slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total scalar count over every stored tensor.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::dim("param set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Binds parameters of one store into a graph on first use, so a parameter
/// used in several places is a single leaf whose gradient accumulates.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Binds parameters as constants; they never receive gradients.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    /// Uses existing graph vars for every parameter, in store order. Lets a
    /// finite-difference harness own the leaves.
    pub fn preset(store: &'s ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::dim("binder preset", &[store.len()], &[vars.len()]));
        }
        Ok(Self {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    /// Routes one parameter to an existing var.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            g.leaf(t)
        } else {
            g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; `None` for parameters the loss never touched.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Adds `src` into `dst` slot by slot.
pub fn accumulate(dst: &mut [Option<Tensor>], src: Vec<Option<Tensor>>) {
    for (d, s) in dst.iter_mut().zip(src) {
        let Some(s) = s else { continue };
        match d {
            Some(d) => d
                .data_mut()
                .iter_mut()
                .zip(s.data())
                .for_each(|(a, b)| *a += b),
            None => *d = Some(s),
        }
    }
}
