//! Parameter declarations, separate from storage.
//!
//! Models declare their parameters into a [`Layout`]; the layout can either be
//! counted (reference-size presets are never allocated) or materialized into a
//! [`ParamStore`]. Declaration order fixes the `ParamId`s, so ids in a model's
//! structure are valid for any store materialized from its layout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Default standard deviation for freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal(0, std²) truncated at ±2σ.
    TruncatedNormal(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamDecl {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Layout {
    decls: Vec<ParamDecl>,
}

impl Layout {
    pub fn new() -> Self {
        Layout { decls: Vec::new() }
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.decls.push(ParamDecl {
            name: name.into(),
            shape,
            init,
            trainable: false,
        });
        ParamId(self.decls.len() - 1)
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn decl(&self, id: ParamId) -> &ParamDecl {
        &self.decls[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.decls[id.0].trainable = on;
    }

    /// Trainable iff the name starts with one of `prefixes`.
    pub fn set_trainable_by_prefix(&mut self, prefixes: &[&str]) {
        for d in &mut self.decls {
            d.trainable = prefixes.iter().any(|p| d.name.starts_with(p));
        }
    }

    pub fn total_params(&self) -> u64 {
        self.decls.iter().map(ParamDecl::numel).sum()
    }

    /// Allocates and initializes every parameter. Parameter `i` draws from
    /// stream `i` of `rng`, so values do not depend on allocation order elsewhere.
    pub fn materialize<T: Float>(&self, rng: &RngState) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (i, d) in self.decls.iter().enumerate() {
            let n = d.numel() as usize;
            let data = match d.init {
                Init::TruncatedNormal(std) => rng.split(i as u64).truncated_normal(std, n),
                Init::Normal(std) => rng.split(i as u64).normal_vec(std, n),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            store.add(d.name.clone(), Tensor::new(d.shape.clone(), data)?, d.trainable)?;
        }
        Ok(store)
    }
}
