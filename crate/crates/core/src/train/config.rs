//! Optimizer hyperparameters and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adapt::{Unfreeze, VariantSpec};
use crate::error::{Error, Result};
use crate::eval::DecodeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_fraction: f64,
    /// Parameter group (first dotted name component) → fixed learning rate.
    pub group_lrs: BTreeMap<String, f64>,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Supervise every position instead of only the answer.
    pub full_sequence_loss: bool,
    /// Decoding used for validation during training.
    pub eval_decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 64,
            lr_start: 1e-5,
            lr_peak: 2e-5,
            lr_end: 1e-6,
            warmup_fraction: 0.1,
            group_lrs: [("prompt".to_string(), 1e-5), ("adapters".to_string(), 1e-5)].into(),
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
            full_sequence_loss: false,
            eval_decode: DecodeConfig::default(),
        }
    }
}

pub const BACKBONE_LR: f64 = 1e-7;

impl TrainConfig {
    /// Defaults plus the very small fixed rate for any released backbone.
    pub fn for_variant(variant: &VariantSpec) -> Self {
        let mut cfg = TrainConfig::default();
        cfg.release_backbones(variant.unfreeze);
        cfg
    }

    pub fn release_backbones(&mut self, unfreeze: Unfreeze) {
        if matches!(unfreeze, Unfreeze::LmOnly | Unfreeze::LmAndEncoder) {
            self.group_lrs.entry("decoder".into()).or_insert(BACKBONE_LR);
        }
        if unfreeze == Unfreeze::LmAndEncoder {
            self.group_lrs.entry("encoder".into()).or_insert(BACKBONE_LR);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_peak >= self.lr_start && self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need lr_peak ≥ lr_start ≥ lr_end > 0, got {} / {} / {}",
                self.lr_peak, self.lr_start, self.lr_end
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.group_lrs.values().any(|&lr| !(lr > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("group learning rates must be positive and weight decay non-negative".into()));
        }
        self.eval_decode.validate()
    }

    /// Schedule value at fractional step `t ∈ [0, total]`.
    pub fn scheduled_lr(&self, t: f64, total: f64) -> f64 {
        let w = self.warmup_fraction * total;
        if t < w {
            self.lr_start + (self.lr_peak - self.lr_start) * t / w
        } else {
            let tau = if total > w { ((t - w) / (total - w)).clamp(0.0, 1.0) } else { 1.0 };
            self.lr_end + (self.lr_peak - self.lr_end) * (1.0 + (PI * tau).cos()) / 2.0
        }
    }
}

/// Learning rate for `group` at `step` of `total_steps`. Groups with a fixed
/// rate ignore the schedule.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig, group: Option<&str>) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    if let Some(lr) = group.and_then(|g| cfg.group_lrs.get(g)) {
        return Ok(*lr);
    }
    Ok(cfg.scheduled_lr(step as f64, total_steps as f64))
}
