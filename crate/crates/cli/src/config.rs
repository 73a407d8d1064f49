//! Experiment configuration: flat `section.key = value` lines (TOML dotted keys).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epalm_core::adapt::{FrameMode, ScheduleRule, VariantName, VariantSpec};
use epalm_core::error::{Error, Result};
use epalm_core::eval::{DecodeConfig, DecodeMode};
use epalm_core::synth::DatasetSpec;
use epalm_core::train::{PretrainConfig, TrainConfig};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "EPALM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub name: VariantName,
    /// Number of injected levels; `None` keeps the preset.
    pub levels: Option<usize>,
    pub stride: Option<usize>,
    pub prompt_length: Option<usize>,
    pub prompt_mlp: Option<bool>,
    pub frame_mode: FrameMode,
}

impl Default for VariantSection {
    fn default() -> Self {
        VariantSection {
            name: VariantName::Epalm,
            levels: None,
            stride: None,
            prompt_length: None,
            prompt_mlp: None,
            frame_mode: FrameMode::Single,
        }
    }
}

impl VariantSection {
    pub fn spec(&self) -> VariantSpec {
        let mut v = VariantSpec::preset(self.name);
        if let ScheduleRule::Standard { k, stride } = v.schedule {
            v = v.with_levels(self.levels.unwrap_or(k), self.stride.unwrap_or(stride));
        }
        if let Some(mlp) = self.prompt_mlp {
            v = v.with_prompt_mlp(mlp);
        }
        if let (Some(p), Some(len)) = (v.prompt.as_mut(), self.prompt_length) {
            p.length = len;
        }
        if let (Some(d), Some(len)) = (v.deep_prompt.as_mut(), self.prompt_length) {
            *d = len;
        }
        v.frame_mode = self.frame_mode;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Backbone size preset: `tiny` or `small`.
    pub dims: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { dims: "small".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen-data`.
    pub dir: PathBuf,
    /// Share of the training split used, drawn with the run seed.
    pub fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: "data".into(),
            fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_fraction: f64,
    pub group_lrs: BTreeMap<String, f64>,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub full_sequence_loss: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_start: t.lr_start,
            lr_peak: t.lr_peak,
            lr_end: t.lr_end,
            warmup_fraction: t.warmup_fraction,
            group_lrs: t.group_lrs,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
            full_sequence_loss: t.full_sequence_loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeKind {
    Greedy,
    Beam,
    Multinomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: DecodeKind,
    /// Beam width; used by `beam` only.
    pub width: usize,
    /// Sampling temperature; used by `multinomial` only.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: DecodeKind::Greedy,
            width: 3,
            temperature: 1.0,
            max_new_tokens: DecodeConfig::default().max_new_tokens,
            seed: 0,
        }
    }
}

impl DecodeSection {
    pub fn config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: match self.mode {
                DecodeKind::Greedy => DecodeMode::Greedy,
                DecodeKind::Beam => DecodeMode::Beam { width: self.width },
                DecodeKind::Multinomial => DecodeMode::Multinomial {
                    temperature: self.temperature,
                },
            },
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Run directory: metrics, checkpoints, resolved config, evaluation files.
    pub dir: PathBuf,
    /// Where pretrained backbones are cached, keyed by a hash of their recipe.
    pub backbone_cache: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/default".into(),
            backbone_cache: "runs/backbones".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: VariantSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads `path`, applies the seed override, makes relative paths relative
    /// to the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.train.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dir, &mut cfg.output.dir, &mut cfg.output.backbone_cache] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant_spec().validate()?;
        self.train_config().validate()?;
        self.pretrain.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config(format!("data.fraction {} outside (0, 1]", self.data.fraction)));
        }
        Ok(())
    }

    pub fn variant_spec(&self) -> VariantSpec {
        self.variant.spec()
    }

    /// Optimizer settings, with the small fixed rate for any released backbone.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_start: t.lr_start,
            lr_peak: t.lr_peak,
            lr_end: t.lr_end,
            warmup_fraction: t.warmup_fraction,
            group_lrs: t.group_lrs.clone(),
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
            full_sequence_loss: t.full_sequence_loss,
            eval_decode: self.decode.config(),
        };
        cfg.release_backbones(self.variant_spec().unfreeze);
        cfg
    }

    /// Every key with its effective value, one `a.b = v` line each.
    pub fn to_flat(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        Ok(lines.join("\n") + "\n")
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) if !t.is_empty() => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        toml::Value::Table(_) => out.push(format!("{prefix} = {{}}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Dataset specification for `gen-data`, in the same flat format.
pub fn parse_dataset_spec(text: &str) -> Result<DatasetSpec> {
    let spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Dataset(e.message().to_string()))?;
    spec.validate()?;
    Ok(spec)
}
