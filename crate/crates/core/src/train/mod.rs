//! Fine-tuning, optimization, checkpoints and backbone pretraining.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod pretrain;
pub mod run;

pub use checkpoint::*;
pub use config::*;
pub use data::*;
pub use optim::*;
pub use pretrain::*;
pub use run::*;
