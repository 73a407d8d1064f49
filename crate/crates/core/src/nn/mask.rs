//! Causal visibility over the `[prompt; cls slot; text]` layout.

use crate::autodiff::AttentionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompt_len: usize,
    /// Rows occupied by the reserved perception slot (0 before the first injection).
    pub slot_rows: usize,
    pub text_len: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.prompt_len + self.slot_rows + self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_start(&self) -> usize {
        self.prompt_len + self.slot_rows
    }
}

/// Lower-triangular (inclusive) visibility over the concatenated layout: prompt
/// rows see preceding prompt rows, the slot sees the prompt and itself, and text
/// rows see the prompt, the slot, and preceding text.
pub fn build_causal_mask(prompt_len: usize, has_cls: bool, text_len: usize) -> AttentionMask {
    AttentionMask::causal(prompt_len + usize::from(has_cls) + text_len)
}
