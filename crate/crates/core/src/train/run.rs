//! The fine-tuning loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::EpalmModel;
use crate::autodiff::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::adapt::budget::group_of;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, MetricReport};
use crate::parallel;
use crate::rng::RngState;
use crate::synth::{Task, Vocabulary};
use crate::tensor::Float;
use crate::train::checkpoint::{save_checkpoint_with_meta, CheckpointMeta};
use crate::train::config::{lr_at, TrainConfig};
use crate::train::data::PreparedExample;
use crate::train::optim::{adamw_step, AdamWConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<MetricLine>,
    /// Best validation score (exact match for QA, BLEU@4 for captions).
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_report: Option<MetricReport>,
    pub steps: u64,
}

/// Where a run writes its files: `metrics.jsonl`, `init.ckpt`, `best.ckpt`, `last.ckpt`.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
}

impl RunFiles {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunFiles { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Loss value and parameter gradients of one graph built by `build`.
pub fn loss_and_grad<T: Float, F>(store: &ParamStore<T>, build: F) -> Result<(f64, Gradients<T>)>
where
    F: FnOnce(&mut Graph<'_, T>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    let value = g
        .scalar(loss)
        .ok_or_else(|| Error::Config("loss must be a scalar".into()))?
        .to_f64_lossy();
    Ok((value, g.backward(loss)?.into_params()))
}

/// Batch mean loss and mean gradient. Per-item work runs through
/// [`parallel::map`]; the reduction is sequential in batch order, so the
/// result does not depend on the thread count.
pub fn batch_gradients<T: Float, I: Sync, F>(store: &ParamStore<T>, items: &[I], build: F) -> Result<(f64, Gradients<T>)>
where
    F: Fn(&mut Graph<'_, T>, &I) -> Result<NodeId> + Sync + Send,
{
    let parts = parallel::map(items, |it| loss_and_grad(store, |g| build(g, it)));
    reduce(parts, items.len())
}

/// Same as [`batch_gradients`] but always on the calling thread.
pub fn batch_gradients_sequential<T: Float, I, F>(store: &ParamStore<T>, items: &[I], build: F) -> Result<(f64, Gradients<T>)>
where
    F: Fn(&mut Graph<'_, T>, &I) -> Result<NodeId>,
{
    let parts = parallel::map_sequential(items, |it| loss_and_grad(store, |g| build(g, it)));
    reduce(parts, items.len())
}

fn reduce<T: Float>(parts: Vec<Result<(f64, Gradients<T>)>>, n: usize) -> Result<(f64, Gradients<T>)> {
    let mut loss = 0.0;
    let mut grads = Gradients::new();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.merge(g);
    }
    let inv = 1.0 / n as f64;
    grads.scale(T::from_f64_lossy(inv));
    Ok((loss * inv, grads))
}

/// Mean cross-entropy over the supervised positions of one example.
pub fn example_loss<T: Float>(
    model: &EpalmModel<T>,
    g: &mut Graph<'_, T>,
    ex: &PreparedExample<T>,
    full_sequence: bool,
) -> Result<NodeId> {
    let out = model.forward_multimodal(g, ex.perception(), &ex.input)?;
    if full_sequence {
        g.cross_entropy(out.decoder.logits, &ex.targets, &vec![true; ex.targets.len()])
    } else {
        g.cross_entropy(out.decoder.logits, &ex.targets, &ex.mask)
    }
}

/// Mean loss and gradient of `model` over a batch of examples.
pub fn batch_loss_and_grad<T: Float>(
    model: &EpalmModel<T>,
    batch: &[&PreparedExample<T>],
    full_sequence: bool,
) -> Result<(f64, Gradients<T>)> {
    batch_gradients(&model.params, batch, |g, ex| example_loss(model, g, ex, full_sequence))
}

fn abort(step: u64, epoch: usize, lr: f64, norm: f64, why: &str) -> Error {
    Error::Numeric(format!(
        "training aborted at step {step} (epoch {epoch}): {why}; last lr {lr:e}, grad norm {norm:e}"
    ))
}

struct MetricSink {
    file: Option<std::io::BufWriter<std::fs::File>>,
    lines: Vec<MetricLine>,
}

impl MetricSink {
    fn emit(&mut self, line: MetricLine) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, &line)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }
}

fn save(model: &EpalmModel<impl Float>, path: &Path, step: u64, epoch: usize) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: 1,
        variant: serde_json::to_value(&model.arch.variant)?,
        step,
        epoch,
        trainable_only: true,
    };
    save_checkpoint_with_meta(&model.params, path, &meta)
}

/// Trains the variant's trainable parameters. Deterministic given `cfg.seed`:
/// the epoch-`e` order is a Fisher–Yates shuffle from stream `e + 1` of the
/// seed, and the last partial batch is kept.
pub fn train_run<T: Float>(
    model: &mut EpalmModel<T>,
    train: &[PreparedExample<T>],
    val: &[PreparedExample<T>],
    vocab: &Vocabulary,
    task: Task,
    cfg: &TrainConfig,
    files: &RunFiles,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(d) = &files.dir {
        std::fs::create_dir_all(d)?;
    }
    let mut sink = MetricSink {
        file: match files.path("metrics.jsonl") {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        },
        lines: Vec::new(),
    };
    if let Some(p) = files.path("init.ckpt") {
        save(model, &p, 0, 0)?;
    }
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let groups: Vec<String> = model
        .params
        .iter()
        .map(|(_, p)| group_of(&p.name).to_string())
        .collect();
    let mut state = OptimState::new(&model.params);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let root = RngState::new(cfg.seed);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, MetricReport)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split(epoch as u64 + 1).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let base_lr = lr_at(step as usize, total, cfg, None)?;
            let (loss, mut grads) = match batch_loss_and_grad(model, &batch, cfg.full_sequence_loss) {
                Ok(x) => x,
                Err(Error::NonFinite(op)) => {
                    return Err(abort(step, epoch, base_lr, f64::NAN, &format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            };
            let norm = grads.global_norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(abort(step, epoch, base_lr, norm, "non-finite loss or gradient"));
            }
            if let Some(max) = cfg.grad_clip {
                if norm > max {
                    grads.scale(T::from_f64_lossy(max / norm));
                }
            }
            let lr_for = |id: ParamId| {
                cfg.group_lrs
                    .get(groups[id.index()].as_str())
                    .copied()
                    .unwrap_or(base_lr)
            };
            adamw_step(&mut model.params, &grads, &mut state, &lr_for, &adam)?;
            epoch_loss += loss;
            step += 1;
        }
        sink.emit(MetricLine {
            step,
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: epoch_loss / steps_per_epoch as f64,
        })?;
        if !val.is_empty() {
            let (report, _) = evaluate_split(model, val, vocab, &cfg.eval_decode)?;
            for (metric, value) in [("exact_match", report.exact_match), ("bleu4", report.bleu4)] {
                sink.emit(MetricLine {
                    step,
                    epoch,
                    split: "val".into(),
                    metric: metric.into(),
                    value,
                })?;
            }
            let score = if task == Task::Caption { report.bleu4 } else { report.exact_match };
            if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                if let Some(p) = files.path("best.ckpt") {
                    save(model, &p, step, epoch)?;
                }
                best = Some((score, epoch, report));
            }
        }
    }
    if let Some(p) = files.path("last.ckpt") {
        save(model, &p, step, cfg.epochs - 1)?;
    }
    let (best_val, best_epoch, best_report) = match best {
        Some((s, e, r)) => (s, e, Some(r)),
        None => (f64::NAN, 0, None),
    };
    Ok(TrainOutcome {
        history: sink.lines,
        best_val,
        best_epoch,
        best_report,
        steps: step,
    })
}
