//! Bidirectional perceptual encoder with a learned [CLS] token.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::nn::block::Block;
use crate::nn::layout::{Init, Layout, INIT_STD};
use crate::nn::linear::{LayerNorm, Linear};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_patches: usize,
    pub patch_feature_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("encoder needs at least 2 layers".into()));
        }
        if self.n_patches == 0 || self.patch_feature_dim == 0 || self.d_ffn == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }
}

/// [CLS] hidden state after every encoder layer, layer 0 first.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsTrace<T> {
    pub per_layer_cls: Vec<Vec<T>>,
}

impl<T: Float> ClsTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.per_layer_cls.len()
    }

    pub fn dim(&self) -> usize {
        self.per_layer_cls.first().map_or(0, Vec::len)
    }
}

/// The same trace as graph nodes, for when encoder parameters are trainable.
#[derive(Clone, Debug)]
pub struct ClsTraceNodes(pub Vec<NodeId>);

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Encoder {
    pub fn declare(layout: &mut Layout, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        // Fan-in scale keeps patch content from drowning in the positional table.
        let patch_init = Init::Normal(1.0 / (cfg.patch_feature_dim as f64).sqrt());
        let patch_embed = Linear::declare_with(layout, "encoder.patch_embed", cfg.patch_feature_dim, d, patch_init);
        let cls = layout.declare("encoder.cls", vec![1, d], Init::TruncatedNormal(INIT_STD));
        let pos = layout.declare("encoder.pos", vec![cfg.n_patches + 1, d], Init::TruncatedNormal(INIT_STD));
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::declare(layout, &format!("encoder.layers.{i}"), d, cfg.n_heads, cfg.d_ffn))
            .collect();
        let ln_f = LayerNorm::declare(layout, "encoder.ln_f", d);
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Runs the encoder over one patch grid. Returns the final (normed) tokens
    /// and the per-layer [CLS] rows.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>) -> Result<(NodeId, ClsTraceNodes)> {
        let (n, f) = patches.as_matrix_dims();
        if n != self.cfg.n_patches || f != self.cfg.patch_feature_dim {
            return Err(Error::shape(
                "encoder patches",
                &[n, f],
                &[self.cfg.n_patches, self.cfg.patch_feature_dim],
            ));
        }
        let x = g.input(n, f, patches.data().to_vec())?;
        let x = self.patch_embed.forward(g, x)?;
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, x])?;
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos)?;
        let mut trace = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, x, None, None, None)?;
            trace.push(g.slice_rows(x, 0, 1)?);
        }
        let out = self.ln_f.forward(g, x)?;
        Ok((out, ClsTraceNodes(trace)))
    }

    /// Value-only [CLS] trace (no gradient bookkeeping is kept).
    pub fn cls_trace<T: Float>(&self, store: &crate::autodiff::ParamStore<T>, patches: &Tensor<T>) -> Result<ClsTrace<T>> {
        let mut g = Graph::new(store);
        let (_, nodes) = self.forward(&mut g, patches)?;
        Ok(ClsTrace {
            per_layer_cls: nodes.0.iter().map(|&id| g.value(id).to_vec()).collect(),
        })
    }
}
