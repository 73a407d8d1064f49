//! Linear maps from encoder [CLS] states into the decoder's hidden space.

use serde::{Deserialize, Serialize};

use crate::adapt::schedule::InjectionSchedule;
use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::nn::{Layout, Linear};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnectionKind {
    /// One projection shared by every injected level.
    Shared,
    /// A separate projection per level.
    PerLevel,
}

#[derive(Clone, Debug)]
pub struct Connection {
    pub kind: ConnectionKind,
    pub projections: Vec<Linear>,
}

impl Connection {
    pub fn declare(layout: &mut Layout, kind: ConnectionKind, levels: usize, enc_dim: usize, dec_dim: usize) -> Self {
        let projections = match kind {
            ConnectionKind::Shared => vec![Linear::declare(layout, "connection.shared", enc_dim, dec_dim)],
            ConnectionKind::PerLevel => (0..levels)
                .map(|k| Linear::declare(layout, &format!("connection.level.{k}"), enc_dim, dec_dim))
                .collect(),
        };
        Connection { kind, projections }
    }

    pub fn projection(&self, k: usize) -> Result<&Linear> {
        let idx = match self.kind {
            ConnectionKind::Shared => 0,
            ConnectionKind::PerLevel => k,
        };
        self.projections.get(idx).ok_or(Error::Index {
            what: "connection level",
            index: k,
            bound: self.projections.len(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.projections.iter().flat_map(Linear::params).collect()
    }

    /// Projects `trace[e_k]`, the [CLS] of the `k`-th scheduled encoder layer.
    /// `trace` holds one node per encoder layer.
    pub fn project_cls<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        trace: &[NodeId],
        schedule: &InjectionSchedule,
        k: usize,
    ) -> Result<NodeId> {
        let &(e, _) = schedule.pairs().get(k).ok_or(Error::Index {
            what: "schedule level",
            index: k,
            bound: schedule.len(),
        })?;
        let cls = *trace.get(e).ok_or(Error::Index {
            what: "cls trace layer",
            index: e,
            bound: trace.len(),
        })?;
        let proj = self.projection(k)?;
        let (r, c) = g.shape(cls);
        if c != proj.in_dim {
            return Err(Error::shape("project_cls", &[r, c], &[r, proj.in_dim]));
        }
        proj.forward(g, cls)
    }
}
