//! Open-ended generation and evaluation metrics.

pub mod decode;
pub mod evaluate;
pub mod metrics;

pub use decode::{argmax, beam_search, generate, greedy, log_softmax, ConditionedModel, DecodeConfig, DecodeMode, NextToken};
pub use evaluate::{evaluate_split, score_predictions, write_predictions, MetricReport, Prediction};
pub use metrics::{bleu4, cider, exact_match};
