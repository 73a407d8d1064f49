//! Soft prompts: trainable rows prepended to the decoder input.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::Result;
use crate::nn::{Init, Layout, Linear, INIT_STD};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftPromptSpec {
    pub length: usize,
    pub with_mlp: bool,
    /// Hidden width of the per-token MLP; `None` means the decoder width.
    pub mlp_hidden: Option<usize>,
}

impl Default for SoftPromptSpec {
    fn default() -> Self {
        SoftPromptSpec {
            length: 10,
            with_mlp: true,
            mlp_hidden: None,
        }
    }
}

/// An embedding table indexed by prompt position `0..P`, optionally followed by
/// a two-layer GELU MLP applied to each prompt row.
#[derive(Clone, Debug)]
pub struct SoftPrompt {
    pub spec: SoftPromptSpec,
    pub table: ParamId,
    pub mlp: Option<(Linear, Linear)>,
}

impl SoftPrompt {
    pub fn declare(layout: &mut Layout, spec: SoftPromptSpec, d: usize) -> Self {
        let table = layout.declare("prompt.embed", vec![spec.length, d], Init::Normal(INIT_STD));
        let mlp = spec.with_mlp.then(|| {
            let hidden = spec.mlp_hidden.unwrap_or(d);
            (
                Linear::declare(layout, "prompt.mlp.fc1", d, hidden),
                Linear::declare(layout, "prompt.mlp.fc2", hidden, d),
            )
        });
        SoftPrompt { spec, table, mlp }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>) -> Result<NodeId> {
        let table = g.param(self.table);
        let ids: Vec<usize> = (0..self.spec.length).collect();
        let rows = g.embedding(table, &ids)?;
        match &self.mlp {
            Some((fc1, fc2)) => {
                let h = fc1.forward(g, rows)?;
                let h = g.gelu(h)?;
                fc2.forward(g, h)
            }
            None => Ok(rows),
        }
    }
}

/// One fresh prompt per decoder layer; layer `j`'s rows replace the prompt rows
/// entering block `j`. Layer 0's prompt is the input prompt.
#[derive(Clone, Debug)]
pub struct DeepPrompt {
    pub length: usize,
    pub per_layer: Vec<ParamId>,
}

impl DeepPrompt {
    pub fn declare(layout: &mut Layout, length: usize, n_layers: usize, d: usize) -> Self {
        let per_layer = (0..n_layers)
            .map(|j| layout.declare(format!("prompt.deep.{j}"), vec![length, d], Init::Normal(INIT_STD)))
            .collect();
        DeepPrompt { length, per_layer }
    }

    pub fn layer<T: Float>(&self, g: &mut Graph<'_, T>, layer: usize) -> Option<NodeId> {
        self.per_layer.get(layer).map(|&id| g.param(id))
    }
}
