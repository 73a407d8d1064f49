//! Transformer building blocks: a bidirectional [CLS] encoder and a causal decoder.

pub mod block;
pub mod decoder;
pub mod encoder;
pub mod layout;
pub mod linear;
pub mod mask;

pub use decoder::{Decoder, DecoderConfig, DecoderHooks, DecoderOutput, InjectFn, NoHooks};
pub use encoder::{ClsTrace, ClsTraceNodes, Encoder, EncoderConfig};
pub use layout::{Init, Layout, ParamDecl, INIT_STD};
pub use linear::{LayerNorm, Linear};
pub use mask::{build_causal_mask, SequenceLayout};
