//! Synthetic grid-world benchmarks and word-level tokenization.

pub mod augment;
pub mod generate;
pub mod grid;
pub mod vocab;

pub use augment::{mask_spans, subsample_fraction};
pub use generate::{gen_dataset, prior_ceiling, read_jsonl, write_jsonl, DatasetSpec, SyntheticExample, Task};
pub use grid::{answer_for, GridWorld, Object, QuestionKind};
pub use vocab::{Vocabulary, BOS, EOS, PAD, SEP};
