//! Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.

use crate::autodiff::{AttentionMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::layout::Layout;
use crate::nn::linear::{LayerNorm, Linear};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn declare(layout: &mut Layout, name: &str, d: usize, n_heads: usize) -> Self {
        SelfAttention {
            q: Linear::declare(layout, &format!("{name}.q"), d, d),
            k: Linear::declare(layout, &format!("{name}.k"), d, d),
            v: Linear::declare(layout, &format!("{name}.v"), d, d),
            out: Linear::declare(layout, &format!("{name}.out"), d, d),
            n_heads,
        }
    }

    /// `mask = None` means every position sees every other (bidirectional).
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId, mask: Option<&AttentionMask>) -> Result<NodeId> {
        let (n, d) = g.shape(x);
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("attention mask", &[n, n], &[m.len(), m.len()]));
            }
        }
        let dh = d / self.n_heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = match mask {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores)?,
            };
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.out.forward(g, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn declare(layout: &mut Layout, name: &str, d: usize, d_ffn: usize) -> Self {
        FeedForward {
            fc1: Linear::declare(layout, &format!("{name}.fc1"), d, d_ffn),
            fc2: Linear::declare(layout, &format!("{name}.fc2"), d_ffn, d),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Hook applied to a sublayer output before it is added back to the residual stream.
pub type SublayerHook<'h, T> = &'h dyn Fn(&mut Graph<'_, T>, NodeId) -> Result<NodeId>;

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn declare(layout: &mut Layout, name: &str, d: usize, n_heads: usize, d_ffn: usize) -> Self {
        Block {
            ln1: LayerNorm::declare(layout, &format!("{name}.ln1"), d),
            attn: SelfAttention::declare(layout, &format!("{name}.attn"), d, n_heads),
            ln2: LayerNorm::declare(layout, &format!("{name}.ln2"), d),
            ffn: FeedForward::declare(layout, &format!("{name}.ffn"), d, d_ffn),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        mask: Option<&AttentionMask>,
        after_attn: Option<SublayerHook<'_, T>>,
        after_ffn: Option<SublayerHook<'_, T>>,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, x)?;
        let mut a = self.attn.forward(g, h, mask)?;
        if let Some(hook) = after_attn {
            a = hook(g, a)?;
        }
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let mut f = self.ffn.forward(g, h)?;
        if let Some(hook) = after_ffn {
            f = hook(g, f)?;
        }
        g.add(x, f)
    }
}
