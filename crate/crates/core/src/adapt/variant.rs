//! Named adaptation variants and baselines, and what each one trains.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::adapter::AdapterSpec;
use crate::adapt::connection::ConnectionKind;
use crate::adapt::prompt::SoftPromptSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariantName {
    EpalmLin,
    EpalmPt,
    Epalm,
    EpalmAda,
    DeepPt,
    BPromptfuse,
    BLimber,
    BMagma,
    TextOnly,
    FullFt,
}

impl VariantName {
    pub const ALL: [VariantName; 10] = [
        VariantName::EpalmLin,
        VariantName::EpalmPt,
        VariantName::Epalm,
        VariantName::EpalmAda,
        VariantName::DeepPt,
        VariantName::BPromptfuse,
        VariantName::BLimber,
        VariantName::BMagma,
        VariantName::TextOnly,
        VariantName::FullFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::EpalmLin => "EPALM_LIN",
            VariantName::EpalmPt => "EPALM_PT",
            VariantName::Epalm => "EPALM",
            VariantName::EpalmAda => "EPALM_ADA",
            VariantName::DeepPt => "DEEP_PT",
            VariantName::BPromptfuse => "B_PROMPTFUSE",
            VariantName::BLimber => "B_LIMBER",
            VariantName::BMagma => "B_MAGMA",
            VariantName::TextOnly => "TEXT_ONLY",
            VariantName::FullFt => "FULL_FT",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Which backbone weights, if any, are released for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unfreeze {
    #[default]
    None,
    LmOnly,
    LmAndEncoder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    #[default]
    Single,
    /// Encode every frame and average the per-layer [CLS] states.
    AverageCls,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleRule {
    /// Last `k` encoder layers into every `stride`-th of the last decoder layers.
    Standard { k: usize, stride: usize },
    /// Final encoder layer into the decoder input only.
    InputOnly,
    Pairs { pairs: Vec<(usize, usize)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: VariantName,
    /// `None` means perception is never consulted.
    pub connection: Option<ConnectionKind>,
    pub prompt: Option<SoftPromptSpec>,
    /// Per-layer prompt length; replaces `prompt` when set.
    pub deep_prompt: Option<usize>,
    pub adapters: Option<AdapterSpec>,
    pub schedule: ScheduleRule,
    pub unfreeze: Unfreeze,
    pub frame_mode: FrameMode,
    /// Prepend every final encoder token instead of the [CLS] alone.
    pub all_tokens: bool,
}

pub const DEFAULT_LEVELS: usize = 6;
pub const DEFAULT_STRIDE: usize = 2;

impl VariantSpec {
    pub fn preset(name: VariantName) -> Self {
        use ConnectionKind::*;
        let standard = ScheduleRule::Standard {
            k: DEFAULT_LEVELS,
            stride: DEFAULT_STRIDE,
        };
        let prompt = Some(SoftPromptSpec::default());
        let base = VariantSpec {
            name,
            connection: None,
            prompt: None,
            deep_prompt: None,
            adapters: None,
            schedule: standard,
            unfreeze: Unfreeze::None,
            frame_mode: FrameMode::Single,
            all_tokens: false,
        };
        match name {
            VariantName::EpalmLin => VariantSpec {
                connection: Some(Shared),
                ..base
            },
            VariantName::EpalmPt => VariantSpec {
                connection: Some(Shared),
                prompt,
                ..base
            },
            VariantName::Epalm => VariantSpec {
                connection: Some(PerLevel),
                prompt,
                ..base
            },
            VariantName::EpalmAda => VariantSpec {
                connection: Some(PerLevel),
                adapters: Some(AdapterSpec::default()),
                ..base
            },
            VariantName::DeepPt => VariantSpec {
                connection: Some(PerLevel),
                deep_prompt: Some(SoftPromptSpec::default().length),
                ..base
            },
            VariantName::BPromptfuse => VariantSpec {
                connection: Some(Shared),
                prompt,
                schedule: ScheduleRule::InputOnly,
                ..base
            },
            VariantName::BLimber => VariantSpec {
                connection: Some(Shared),
                schedule: ScheduleRule::InputOnly,
                ..base
            },
            VariantName::BMagma => VariantSpec {
                connection: Some(Shared),
                adapters: Some(AdapterSpec::default()),
                schedule: ScheduleRule::InputOnly,
                ..base
            },
            VariantName::TextOnly => VariantSpec { prompt, ..base },
            VariantName::FullFt => VariantSpec {
                unfreeze: Unfreeze::LmAndEncoder,
                ..VariantSpec::preset(VariantName::Epalm)
            },
        }
    }

    /// Replaces `k` and `stride` of a standard schedule; other rules are kept.
    pub fn with_levels(mut self, k: usize, stride: usize) -> Self {
        if let ScheduleRule::Standard { .. } = self.schedule {
            self.schedule = ScheduleRule::Standard { k, stride };
        }
        self
    }

    pub fn with_prompt_mlp(mut self, with_mlp: bool) -> Self {
        if let Some(p) = self.prompt.as_mut() {
            p.with_mlp = with_mlp;
        }
        self
    }

    pub fn uses_perception(&self) -> bool {
        self.connection.is_some()
    }

    /// Parameter-name prefixes that are trainable under this variant.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        let mut p = vec!["connection.", "prompt.", "adapters."];
        match self.unfreeze {
            Unfreeze::None => {}
            Unfreeze::LmOnly => p.push("decoder."),
            Unfreeze::LmAndEncoder => p.extend(["decoder.", "encoder."]),
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.all_tokens && self.schedule != ScheduleRule::InputOnly {
            return Err(Error::Config("all-token prepending requires the input-only schedule".into()));
        }
        if self.all_tokens && self.connection != Some(ConnectionKind::Shared) {
            return Err(Error::Config("all-token prepending requires a shared connection".into()));
        }
        if self.deep_prompt == Some(0) {
            return Err(Error::Config("deep prompt length must be positive".into()));
        }
        if self.deep_prompt.is_some() && self.prompt.is_some() {
            return Err(Error::Config("deep prompt and input prompt are exclusive".into()));
        }
        Ok(())
    }
}
