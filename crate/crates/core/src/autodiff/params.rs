//! Named parameters and their frozen/trainable split.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Owns every parameter of a model. Names are unique dotted paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let mut tensor = tensor;
        tensor.set_requires_grad(trainable);
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect()
    }

    /// Marks every parameter whose name starts with one of `prefixes` as trainable
    /// and freezes the rest.
    pub fn set_trainable_by_prefix(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            let on = prefixes.iter().any(|pre| p.name.starts_with(pre));
            p.trainable = on;
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        let p = &mut self.params[id.0];
        p.trainable = on;
        p.tensor.set_requires_grad(on);
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces the values of `id`, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.numel() != data.len() {
            return Err(Error::shape("set_data", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Gradients of trainable parameters produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    entries: Vec<(ParamId, Vec<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn new() -> Self {
        Gradients { entries: Vec::new() }
    }

    /// Adds `g` to the entry for `id`, creating it if absent.
    pub fn insert(&mut self, id: ParamId, g: Vec<T>) {
        match self.entries.binary_search_by_key(&id, |(i, _)| *i) {
            Ok(pos) => {
                let e = &mut self.entries[pos].1;
                e.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
            }
            Err(pos) => self.entries.insert(pos, (id, g)),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|pos| self.entries[pos].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sums `other` into `self` in id order.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.entries {
            self.insert(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, g) in &mut self.entries {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
