//! Turning synthetic examples into token sequences, loss masks and cached perception.

use crate::adapt::{EncodedPerception, EpalmModel, Perception};
use crate::error::{Error, Result};
use crate::parallel;
use crate::synth::{SyntheticExample, Task, Vocabulary, BOS, EOS, SEP};
use crate::tensor::{Float, Tensor};

/// Which prediction positions carry loss. `ids` is the full sequence; the
/// result has one entry per prediction, i.e. `ids.len() - 1`.
///
/// VQA supervises only tokens strictly after the single SEP; captions
/// supervise every token after BOS.
pub fn loss_mask_for(ids: &[usize], task: Task) -> Result<Vec<bool>> {
    if ids.len() < 2 {
        return Err(Error::Empty("sequence shorter than two tokens"));
    }
    match task {
        Task::Vqa | Task::FrameVqa => {
            let seps: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == SEP).map(|(i, _)| i).collect();
            match seps.as_slice() {
                [s] => Ok((1..ids.len()).map(|target| target > *s).collect()),
                [] => Err(Error::Dataset("VQA sequence has no separator".into())),
                _ => Err(Error::Dataset(format!("VQA sequence has {} separators", seps.len()))),
            }
        }
        Task::Caption => Ok(vec![true; ids.len() - 1]),
    }
}

#[derive(Clone, Debug)]
pub enum PerceptionData<T> {
    Frames(Vec<Tensor<T>>),
    Encoded(EncodedPerception<T>),
}

#[derive(Clone, Debug)]
pub struct PreparedExample<T> {
    pub id: usize,
    /// Teacher-forcing input: the full sequence without its last token.
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    /// Generation prefix: BOS + question, or BOS alone for captions.
    pub prefix: Vec<usize>,
    pub gold: String,
    pub perception: PerceptionData<T>,
}

impl<T: Float> PreparedExample<T> {
    pub fn perception(&self) -> Perception<'_, T> {
        match &self.perception {
            PerceptionData::Frames(f) if f.len() == 1 => Perception::Patches(&f[0]),
            PerceptionData::Frames(f) => Perception::Frames(f),
            PerceptionData::Encoded(e) => Perception::Encoded(e),
        }
    }
}

pub fn sequence_for(ex: &SyntheticExample, vocab: &Vocabulary, task: Task) -> Result<(Vec<usize>, Vec<usize>, String)> {
    let mut ids = vec![BOS];
    match task {
        Task::Vqa | Task::FrameVqa => {
            ids.extend(vocab.tokenize(&ex.question)?);
            let prefix = ids.clone();
            ids.extend(vocab.tokenize(&ex.answer)?);
            ids.push(EOS);
            Ok((ids, prefix, ex.answer.clone()))
        }
        Task::Caption => {
            let cap = ex.caption.as_deref().ok_or_else(|| Error::Dataset("caption task needs captions".into()))?;
            ids.extend(vocab.tokenize(cap)?);
            ids.push(EOS);
            Ok((ids, vec![BOS], cap.to_string()))
        }
    }
}

/// Tokenizes every example and, when the encoder is frozen, runs it once per
/// example so training and evaluation can reuse the cached outputs.
pub fn prepare_examples<T: Float>(
    model: &EpalmModel<T>,
    examples: &[SyntheticExample],
    vocab: &Vocabulary,
    task: Task,
) -> Result<Vec<PreparedExample<T>>> {
    let cache = model.arch.schedule.is_some() && !model.arch.encoder_trainable(&model.params);
    let indexed: Vec<(usize, &SyntheticExample)> = examples.iter().enumerate().collect();
    parallel::map(&indexed, |&(id, ex)| {
        let (ids, prefix, gold) = sequence_for(ex, vocab, task)?;
        let mask = loss_mask_for(&ids, task)?;
        let frames = ex.frame_tensors::<T>()?;
        let perception = if cache {
            let p = if frames.len() == 1 {
                Perception::Patches(&frames[0])
            } else {
                Perception::Frames(&frames)
            };
            PerceptionData::Encoded(model.encode(p)?)
        } else {
            PerceptionData::Frames(frames)
        };
        Ok(PreparedExample {
            id,
            input: ids[..ids.len() - 1].to_vec(),
            targets: ids[1..].to_vec(),
            mask,
            prefix,
            gold,
            perception,
        })
    })
    .into_iter()
    .collect()
}
