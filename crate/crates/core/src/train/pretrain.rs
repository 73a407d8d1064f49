//! Self-supervised stand-ins for the frozen backbones.
//!
//! The encoder learns to name each cell's shape and color, and to count the
//! objects, from its last-block [CLS] row. The decoder is a causal LM over documents of the form
//! `caption . question </a> answer`, so it can read a scene description that
//! precedes a question, and over bare `question </a> answer` documents. Text
//! positions are jittered so every position used later has been trained.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Decoder, DecoderConfig, Encoder, EncoderConfig, Init, Layout, Linear};
use crate::rng::RngState;
use crate::synth::{gen_dataset, DatasetSpec, SyntheticExample, Task, Vocabulary, BOS, EOS};
use crate::tensor::{Float, Tensor};
use crate::train::optim::{adamw_step, AdamWConfig, OptimState};
use crate::train::run::batch_gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder_examples: usize,
    pub encoder_epochs: usize,
    pub encoder_lr: f64,
    pub decoder_docs: usize,
    pub decoder_epochs: usize,
    pub decoder_lr: f64,
    pub batch_size: usize,
    /// Probability that a document starts with the scene caption.
    pub caption_prob: f64,
    /// Text positions start at a uniform offset in `0..=max_offset`.
    pub max_offset: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder_examples: 3000,
            encoder_epochs: 10,
            encoder_lr: 2e-3,
            decoder_docs: 12000,
            decoder_epochs: 10,
            decoder_lr: 3e-3,
            batch_size: 32,
            caption_prob: 0.7,
            max_offset: 16,
            seed: 1234,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.encoder_lr > 0.0 && self.decoder_lr > 0.0) {
            return Err(Error::Config("pretraining needs a positive batch size and learning rates".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_prob) {
            return Err(Error::Config("caption_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub encoder_loss: Vec<f64>,
    pub decoder_loss: Vec<f64>,
}

fn corpus(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    let s = DatasetSpec {
        task: Task::Vqa,
        n_train: n.max(1),
        n_val: 1,
        seed,
        ..spec.clone()
    };
    Ok(gen_dataset(&s)?.0)
}

/// Per-cell class targets: 0 for an empty cell, else attribute index + 1.
fn cell_targets(ex: &SyntheticExample, n_shapes: usize, n_colors: usize) -> (Vec<usize>, Vec<usize>) {
    let class = |row: &[f64]| row.iter().position(|&v| v > 0.5).map_or(0, |i| i + 1);
    ex.perception
        .iter()
        .map(|r| (class(&r[..n_shapes]), class(&r[n_shapes..n_shapes + n_colors])))
        .unzip()
}

fn fit<T: Float, I: Sync, F>(
    store: &mut ParamStore<T>,
    items: &[I],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &RngState,
    build: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<'_, T>, &I, usize) -> Result<NodeId> + Sync + Send,
{
    let adam = AdamWConfig::default();
    let mut state = OptimState::new(store);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut erng = rng.split(epoch as u64 + 1);
        erng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            // (item, per-draw salt) so the build closure stays pure.
            let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| (i, erng.below(usize::MAX))).collect();
            let (loss, grads) = batch_gradients(store, &batch, |g, &(i, salt)| build(g, &items[i], salt))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss became {loss} in epoch {epoch}; lr {lr:e}, grad norm {:e}",
                    grads.global_norm()
                )));
            }
            adamw_step(store, &grads, &mut state, &|_| lr, &adam)?;
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Trains an encoder and a decoder from scratch and returns a store holding
/// their `encoder.*` and `decoder.*` parameters, all frozen.
pub fn pretrain_backbones<T: Float>(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    spec: &DatasetSpec,
    cfg: &PretrainConfig,
) -> Result<(ParamStore<T>, PretrainReport)> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    if dec.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "decoder vocabulary {} does not match the task vocabulary {}",
            dec.vocab_size,
            vocab.len()
        )));
    }
    let mut layout = Layout::new();
    let encoder = Encoder::declare(&mut layout, enc)?;
    let decoder = Decoder::declare(&mut layout, dec)?;
    let (ns, nc) = (spec.n_shapes, spec.n_colors);
    let cells = spec.n_patches();
    // Fan-in scale: with small heads the encoder barely receives a signal.
    let head_init = Init::Normal(1.0 / (enc.d_model as f64).sqrt());
    let shape_head = Linear::declare_with(&mut layout, "pretrain.shape_head", enc.d_model, cells * (ns + 1), head_init);
    let color_head = Linear::declare_with(&mut layout, "pretrain.color_head", enc.d_model, cells * (nc + 1), head_init);
    let count_head = Linear::declare_with(&mut layout, "pretrain.count_head", enc.d_model, cells + 1, head_init);
    let root = RngState::new(cfg.seed);
    let mut store: ParamStore<T> = layout.materialize(&root.split(0))?;
    let mut report = PretrainReport::default();

    // Encoder.
    store.set_trainable_by_prefix(&["encoder.", "pretrain."]);
    store.set_trainable(encoder.ln_f.gain, false);
    store.set_trainable(encoder.ln_f.bias, false);
    let data = corpus(spec, cfg.encoder_examples, cfg.seed.wrapping_add(1))?;
    let prepared: Vec<(Tensor<T>, Vec<usize>, Vec<usize>)> = data
        .iter()
        .map(|ex| {
            let (s, c) = cell_targets(ex, ns, nc);
            Ok((ex.perception_tensor()?, s, c))
        })
        .collect::<Result<_>>()?;
    let split_cells = |g: &mut Graph<'_, T>, logits: NodeId, k: usize| -> Result<NodeId> {
        let rows = (0..cells)
            .map(|c| g.slice_cols(logits, c * k, (c + 1) * k))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    };
    let all = vec![true; cells];
    report.encoder_loss = fit(
        &mut store,
        &prepared,
        cfg.encoder_epochs,
        cfg.batch_size,
        cfg.encoder_lr,
        &root.split(1),
        |g, (patches, ts, tc), _| {
            let (_, trace) = encoder.forward(g, patches)?;
            let cls = *trace.0.last().ok_or(Error::Empty("encoder layers"))?;
            let s = shape_head.forward(g, cls)?;
            let s = split_cells(g, s, ns + 1)?;
            let c = color_head.forward(g, cls)?;
            let c = split_cells(g, c, nc + 1)?;
            let n = count_head.forward(g, cls)?;
            let ls = g.cross_entropy(s, ts, &all)?;
            let lc = g.cross_entropy(c, tc, &all)?;
            let ln = g.cross_entropy(n, &[ts.iter().filter(|&&t| t > 0).count()], &[true])?;
            let l = g.add(ls, lc)?;
            g.add(l, ln)
        },
    )?;

    // Decoder.
    store.set_trainable_by_prefix(&["decoder."]);
    let data = corpus(spec, cfg.decoder_docs, cfg.seed.wrapping_add(2))?;
    let docs: Vec<(Vec<usize>, Vec<usize>)> = data
        .iter()
        .map(|ex| {
            let mut qa = vocab.tokenize(&ex.question)?;
            qa.extend(vocab.tokenize(&ex.answer)?);
            qa.push(EOS);
            let mut plain = vec![BOS];
            plain.extend(&qa);
            let mut with_caption = vec![BOS];
            if let Some(c) = &ex.caption {
                with_caption.extend(vocab.tokenize(c)?);
                with_caption.extend(vocab.tokenize(".")?);
            }
            with_caption.extend(&qa);
            Ok((plain, with_caption))
        })
        .collect::<Result<_>>()?;
    let longest = docs.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    if longest + cfg.max_offset > dec.max_positions + 1 {
        return Err(Error::Config(format!(
            "documents of {longest} tokens with offset up to {} exceed max_positions {}",
            cfg.max_offset, dec.max_positions
        )));
    }
    let (p_cap, max_off) = (cfg.caption_prob, cfg.max_offset);
    report.decoder_loss = fit(
        &mut store,
        &docs,
        cfg.decoder_epochs,
        cfg.batch_size,
        cfg.decoder_lr,
        &root.split(2),
        |g, (plain, with_caption), salt| {
            let mut r = RngState::new(salt as u64);
            let doc = if r.uniform() < p_cap { with_caption } else { plain };
            let offset = r.below(max_off + 1);
            let n = doc.len();
            let logits = decoder.lm_forward(g, &doc[..n - 1], offset)?;
            g.cross_entropy(logits, &doc[1..], &vec![true; n - 1])
        },
    )?;

    // Keep only the backbones.
    let mut out = ParamStore::new();
    for (_, p) in store.iter() {
        if p.name.starts_with("encoder.") || p.name.starts_with("decoder.") {
            out.add(p.name.clone(), p.tensor.clone(), false)?;
        }
    }
    Ok((out, report))
}
