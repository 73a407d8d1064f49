//! Finite-difference verification of whole variants.

use crate::adapt::{task_configs, EpalmModel, Perception, VariantSpec};
use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::rng::RngState;
use crate::synth::{Vocabulary, BOS, EOS, SEP};
use crate::tensor::Tensor;

/// Tolerance on the maximum relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

pub const CHECK_PATCHES: usize = 4;
pub const CHECK_FEATURES: usize = 6;

/// Levels used when the variant has a standard schedule: 3 levels, stride 2,
/// which fits the 4-layer encoder and 6-layer decoder of the task presets.
pub const CHECK_LEVELS: (usize, usize) = (3, 2);

/// Runs a gradient check of `variant` on `dims` backbones: the masked answer
/// loss of one random question, differentiated with respect to every
/// trainable parameter. Trainable values are jittered first so that
/// zero-initialized pieces (adapter up-projections) do not hide errors in
/// what feeds them.
pub fn grad_check_variant(variant: &VariantSpec, dims: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let vocab = Vocabulary::standard();
    let (enc, dec) = task_configs(dims, CHECK_PATCHES, CHECK_FEATURES, vocab.len())?;
    let variant = variant.clone().with_levels(CHECK_LEVELS.0, CHECK_LEVELS.1);
    let root = RngState::new(seed);
    let mut model: EpalmModel<f64> = EpalmModel::new(&enc, &dec, &variant, &root.split(0))?;
    let mut jitter = root.split(1);
    for (id, p) in model.params.clone().iter() {
        if p.trainable() {
            let noise: Vec<f64> = jitter.normal_vec(0.05, p.tensor.numel());
            let data: Vec<f64> = p.tensor.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
            model.params.set_data(id, &data)?;
        }
    }
    let mut r = root.split(2);
    let patches = Tensor::new(vec![CHECK_PATCHES, CHECK_FEATURES], r.normal_vec(1.0, CHECK_PATCHES * CHECK_FEATURES))?;
    let first_word = SEP + 1;
    let word = |r: &mut RngState| first_word + r.below(vocab.len() - first_word);
    let ids = vec![BOS, word(&mut r), word(&mut r), SEP, word(&mut r), EOS];
    let (input, targets) = (ids[..ids.len() - 1].to_vec(), ids[1..].to_vec());
    let mask: Vec<bool> = (1..ids.len()).map(|i| i > 3).collect();
    let perception = if model.arch.schedule.is_some() {
        Perception::Patches(&patches)
    } else {
        Perception::Absent
    };
    grad_check(
        &model.params,
        |g| {
            let out = model.forward_multimodal(g, perception, &input)?;
            g.cross_entropy(out.decoder.logits, &targets, &mask)
        },
        opts,
    )
}
