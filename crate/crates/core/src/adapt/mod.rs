//! The adaptation pathway: injection schedules, connections, prompts,
//! adapters, variant assembly and parameter accounting.

pub mod adapter;
pub mod budget;
pub mod connection;
pub mod model;
pub mod presets;
pub mod prompt;
pub mod schedule;
pub mod variant;

pub use adapter::{Adapter, AdapterSpec, LayerAdapters};
pub use budget::{count_params, GroupCount, ParamBudget};
pub use connection::{Connection, ConnectionKind};
pub use model::{average_frame_cls, EncodedPerception, EpalmArch, EpalmModel, MultimodalOutput, Perception};
pub use presets::{decoder_preset, encoder_preset, task_configs, DECODER_PRESETS, ENCODER_PRESETS, TASK_DIMS};
pub use prompt::{DeepPrompt, SoftPrompt, SoftPromptSpec};
pub use schedule::{build_schedule, InjectionSchedule};
pub use variant::{FrameMode, ScheduleRule, Unfreeze, VariantName, VariantSpec};
