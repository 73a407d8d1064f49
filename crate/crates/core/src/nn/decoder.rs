//! Causal decoder with per-layer hooks for slot injection, deep prompts and
//! sublayer adapters. The output projection is tied to the token embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::nn::block::Block;
use crate::nn::layout::{Init, Layout, INIT_STD};
use crate::nn::linear::LayerNorm;
use crate::nn::mask::{build_causal_mask, SequenceLayout};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("decoder needs at least 2 layers".into()));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.d_ffn == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer callbacks consulted by [`Decoder::forward`].
pub trait DecoderHooks<T: Float> {
    /// Rows to write into the reserved slot before layer `layer`. The first
    /// injection creates the slot; later ones overwrite it in place.
    fn inject(&self, _g: &mut Graph<'_, T>, _layer: usize) -> Result<Option<NodeId>> {
        Ok(None)
    }

    /// Replacement for the prompt rows entering `layer` (deep prompts).
    fn layer_prompt(&self, _g: &mut Graph<'_, T>, _layer: usize) -> Result<Option<NodeId>> {
        Ok(None)
    }

    fn has_adapters(&self, _layer: usize) -> bool {
        false
    }

    fn after_attention(&self, _g: &mut Graph<'_, T>, _layer: usize, h: NodeId) -> Result<NodeId> {
        Ok(h)
    }

    fn after_ffn(&self, _g: &mut Graph<'_, T>, _layer: usize, h: NodeId) -> Result<NodeId> {
        Ok(h)
    }
}

pub struct NoHooks;

impl<T: Float> DecoderHooks<T> for NoHooks {}

/// Adapter over a closure for the injection hook only.
pub struct InjectFn<F>(pub F);

impl<T: Float, F> DecoderHooks<T> for InjectFn<F>
where
    F: Fn(&mut Graph<'_, T>, usize) -> Result<Option<NodeId>>,
{
    fn inject(&self, g: &mut Graph<'_, T>, layer: usize) -> Result<Option<NodeId>> {
        (self.0)(g, layer)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[T, V]`, text positions only.
    pub logits: NodeId,
    /// Layout entering each layer.
    pub layouts: Vec<SequenceLayout>,
    /// Slot rows entering each layer, if the slot exists there.
    pub slot_inputs: Vec<Option<NodeId>>,
    /// Final hidden rows (after the last block, before the final norm).
    pub hidden: NodeId,
}

impl DecoderOutput {
    pub fn max_len(&self) -> usize {
        self.layouts.iter().map(SequenceLayout::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Decoder {
    pub fn declare(layout: &mut Layout, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = layout.declare("decoder.embed", vec![cfg.vocab_size, d], Init::TruncatedNormal(INIT_STD));
        let pos = layout.declare("decoder.pos", vec![cfg.max_positions, d], Init::TruncatedNormal(INIT_STD));
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::declare(layout, &format!("decoder.layers.{i}"), d, cfg.n_heads, cfg.d_ffn))
            .collect();
        let ln_f = LayerNorm::declare(layout, "decoder.ln_f", d);
        Ok(Decoder {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Positions: prompt rows take `0..P`, text rows `P+1..P+1+T`; the slot
    /// enters mid-stack and takes none.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        input_ids: &[usize],
        prompt: Option<NodeId>,
        hooks: &dyn DecoderHooks<T>,
    ) -> Result<DecoderOutput> {
        let d = self.cfg.d_model;
        let t = input_ids.len();
        if t == 0 {
            return Err(Error::Empty("decoder input ids"));
        }
        let p = match prompt {
            Some(pn) => {
                let (pr, pc) = g.shape(pn);
                if pc != d {
                    return Err(Error::shape("prompt state", &[pr, pc], &[pr, d]));
                }
                pr
            }
            None => 0,
        };
        if p + 1 + t > self.cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence of {} positions exceeds max_positions {}",
                p + 1 + t,
                self.cfg.max_positions
            )));
        }
        let embed = g.param(self.embed);
        let pos = g.param(self.pos);
        let tok = g.embedding(embed, input_ids)?;
        let text_pos: Vec<usize> = (p + 1..p + 1 + t).collect();
        let tp = g.embedding(pos, &text_pos)?;
        let text = g.add(tok, tp)?;
        let mut x = match prompt {
            Some(pn) => {
                let prompt_pos: Vec<usize> = (0..p).collect();
                let pp = g.embedding(pos, &prompt_pos)?;
                let pr = g.add(pn, pp)?;
                g.concat_rows(&[pr, text])?
            }
            None => text,
        };

        let mut layout = SequenceLayout {
            prompt_len: p,
            slot_rows: 0,
            text_len: t,
        };
        let mut layouts = Vec::with_capacity(self.blocks.len());
        let mut slot_inputs = Vec::with_capacity(self.blocks.len());
        let mut mask: Option<AttentionMask> = None;
        for (j, block) in self.blocks.iter().enumerate() {
            if let Some(lp) = hooks.layer_prompt(g, j)? {
                if g.shape(lp) != (p, d) {
                    let (a, b) = g.shape(lp);
                    return Err(Error::shape("layer prompt", &[a, b], &[p, d]));
                }
                let rest = g.slice_rows(x, p, layout.len())?;
                x = g.concat_rows(&[lp, rest])?;
            }
            if let Some(c) = hooks.inject(g, j)? {
                let (rows, cols) = g.shape(c);
                if cols != d {
                    return Err(Error::shape("injected slot", &[rows, cols], &[rows, d]));
                }
                if layout.slot_rows != 0 && rows != layout.slot_rows {
                    return Err(Error::shape("injected slot", &[rows, cols], &[layout.slot_rows, d]));
                }
                let mut parts = Vec::with_capacity(3);
                if p > 0 {
                    parts.push(g.slice_rows(x, 0, p)?);
                }
                parts.push(c);
                parts.push(g.slice_rows(x, layout.text_start(), layout.len())?);
                x = g.concat_rows(&parts)?;
                layout.slot_rows = rows;
            }
            slot_inputs.push(if layout.slot_rows > 0 {
                Some(if p == 0 && layout.slot_rows == layout.len() {
                    x
                } else {
                    g.slice_rows(x, p, p + layout.slot_rows)?
                })
            } else {
                None
            });
            layouts.push(layout);
            if mask.as_ref().map_or(true, |m| m.len() != layout.len()) {
                mask = Some(build_causal_mask(p, false, layout.slot_rows + t));
            }
            let m = mask.as_ref().expect("mask built above");
            if hooks.has_adapters(j) {
                let attn_hook = |g: &mut Graph<'_, T>, h: NodeId| hooks.after_attention(g, j, h);
                let ffn_hook = |g: &mut Graph<'_, T>, h: NodeId| hooks.after_ffn(g, j, h);
                x = block.forward(g, x, Some(m), Some(&attn_hook), Some(&ffn_hook))?;
            } else {
                x = block.forward(g, x, Some(m), None, None)?;
            }
        }
        let text_rows = g.slice_rows(x, layout.text_start(), layout.len())?;
        let h = self.ln_f.forward(g, text_rows)?;
        let logits = g.matmul_t(h, embed)?;
        Ok(DecoderOutput {
            logits,
            layouts,
            slot_inputs,
            hidden: x,
        })
    }
    /// Plain causal language-model pass with positions `offset..offset+T`;
    /// no prompt, slot or hooks. Returns `[T, V]` logits.
    pub fn lm_forward<T: Float>(&self, g: &mut Graph<'_, T>, input_ids: &[usize], offset: usize) -> Result<NodeId> {
        let t = input_ids.len();
        if t == 0 {
            return Err(Error::Empty("decoder input ids"));
        }
        if offset + t > self.cfg.max_positions {
            return Err(Error::Config(format!(
                "positions up to {} exceed max_positions {}",
                offset + t,
                self.cfg.max_positions
            )));
        }
        let embed = g.param(self.embed);
        let pos = g.param(self.pos);
        let tok = g.embedding(embed, input_ids)?;
        let positions: Vec<usize> = (offset..offset + t).collect();
        let tp = g.embedding(pos, &positions)?;
        let mut x = g.add(tok, tp)?;
        let mask = build_causal_mask(0, false, t);
        for block in &self.blocks {
            x = block.forward(g, x, Some(&mask), None, None)?;
        }
        let h = self.ln_f.forward(g, x)?;
        g.matmul_t(h, embed)
    }
}
