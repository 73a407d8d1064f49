//! Residual bottleneck adapters: `h + Up(ReLU(Down(h)))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Init, Layout, Linear};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub downsample_factor: usize,
    /// Decoder layers `[start, end)` that receive adapters; `None` means all.
    pub layers: Option<(usize, usize)>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            downsample_factor: 8,
            layers: None,
        }
    }
}

impl AdapterSpec {
    pub fn covers(&self, layer: usize) -> bool {
        self.layers.map_or(true, |(a, b)| (a..b).contains(&layer))
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    /// `Up` starts at zero, so a fresh adapter is the identity.
    pub fn declare(layout: &mut Layout, name: &str, d: usize, factor: usize) -> Result<Self> {
        if factor == 0 || d % factor != 0 {
            return Err(Error::Config(format!("adapter width {d} not divisible by factor {factor}")));
        }
        let b = d / factor;
        Ok(Adapter {
            down: Linear::declare(layout, &format!("{name}.down"), d, b),
            up: Linear::declare_with(layout, &format!("{name}.up"), b, d, Init::Zeros),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, hidden: NodeId) -> Result<NodeId> {
        let (r, c) = g.shape(hidden);
        if c != self.down.in_dim {
            return Err(Error::shape("adapter", &[r, c], &[r, self.down.in_dim]));
        }
        let h = self.down.forward(g, hidden)?;
        let h = g.relu(h)?;
        let h = self.up.forward(g, h)?;
        g.add(hidden, h)
    }
}

/// Adapters placed after the attention and FFN sublayers of one block.
#[derive(Clone, Debug)]
pub struct LayerAdapters {
    pub attn: Adapter,
    pub ffn: Adapter,
}
