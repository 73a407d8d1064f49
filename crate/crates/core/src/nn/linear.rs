use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::Result;
use crate::nn::layout::{Init, Layout, INIT_STD};
use crate::tensor::Float;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare(layout: &mut Layout, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::declare_with(layout, name, in_dim, out_dim, Init::TruncatedNormal(INIT_STD))
    }

    pub fn declare_with(layout: &mut Layout, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Self {
        let weight = layout.declare(format!("{name}.weight"), vec![in_dim, out_dim], init);
        let bias = Some(layout.declare(format!("{name}.bias"), vec![out_dim], Init::Zeros));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn declare(layout: &mut Layout, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: layout.declare(format!("{name}.gain"), vec![d], Init::Ones),
            bias: layout.declare(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}
