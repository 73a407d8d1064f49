//! Subcommands of the `epalm` binary, usable as a library by tests.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use epalm_core::adapt::{
    count_params, decoder_preset, encoder_preset, task_configs, EpalmArch, EpalmModel, ParamBudget, VariantName,
    VariantSpec, DECODER_PRESETS, ENCODER_PRESETS,
};
use epalm_core::autodiff::{GradCheckOptions, GradCheckReport, ParamStore};
use epalm_core::error::{Error, Result};
use epalm_core::eval::{evaluate_split, write_predictions, MetricReport};
use epalm_core::nn::{DecoderConfig, EncoderConfig};
use epalm_core::rng::RngState;
use epalm_core::synth::{gen_dataset, read_jsonl, subsample_fraction, write_jsonl, DatasetSpec, Vocabulary};
use epalm_core::tensor::Tensor;
use epalm_core::train::{
    load_into, meta_path, pretrain_backbones, read_checkpoint, save_checkpoint, train_run, CheckpointMeta,
    PreparedExample, RunFiles, TrainOutcome,
};
use epalm_core::verify::{grad_check_variant, GRAD_CHECK_TOL};

pub use config::{parse_dataset_spec, ExperimentConfig, SEED_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NAN: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) | Error::NonFinite(_) => EXIT_NAN,
            Error::Checkpoint(_) => EXIT_MISMATCH,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub n_train: usize,
    pub n_val: usize,
    /// SHA-256 of `train.jsonl` followed by `val.jsonl`, hex.
    pub content_hash: String,
}

fn content_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [TRAIN_FILE, VAL_FILE] {
        h.update(std::fs::read(dir.join(f))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Generates the dataset described by `spec` into `out`.
pub fn gen_data(spec: &DatasetSpec, out: &Path) -> CmdResult<Manifest> {
    spec.validate()?;
    let (train, val) = gen_dataset(spec)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_jsonl(&out.join(TRAIN_FILE), &train)?;
    write_jsonl(&out.join(VAL_FILE), &val)?;
    let manifest = Manifest {
        spec: spec.clone(),
        n_train: train.len(),
        n_val: val.len(),
        content_hash: content_hash(out)?,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let actual = content_hash(dir)?;
    if actual != m.content_hash {
        return Err(Error::Dataset(format!(
            "{}: content hash {} does not match the data files ({actual})",
            path.display(),
            m.content_hash
        )));
    }
    Ok(m)
}

/// Everything a command needs to run a model on a generated dataset.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub spec: DatasetSpec,
    pub vocab: Vocabulary,
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub variant: VariantSpec,
}

impl Setup {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let manifest = read_manifest(&cfg.data.dir)?;
        let vocab = Vocabulary::standard();
        let (enc, dec) = task_configs(
            &cfg.model.dims,
            manifest.spec.n_patches(),
            manifest.spec.feature_dim(),
            vocab.len(),
        )?;
        let variant = cfg.variant_spec();
        Ok(Setup {
            spec: manifest.spec,
            vocab,
            enc,
            dec,
            variant,
            cfg,
        })
    }

    fn backbone_path(&self) -> Result<PathBuf> {
        let key = serde_json::to_vec(&(&self.enc, &self.dec, &self.cfg.pretrain, &self.spec))?;
        let digest = hex::encode(Sha256::digest(&key));
        Ok(self.cfg.output.backbone_cache.join(format!("backbones-{}.ckpt", &digest[..16])))
    }

    /// Pretrained backbones, read from the cache or pretrained and cached.
    pub fn backbones(&self) -> Result<ParamStore<f32>> {
        let path = self.backbone_path()?;
        if path.exists() {
            eprintln!("loading backbones from {}", path.display());
            let mut store = ParamStore::new();
            for t in read_checkpoint(&path)? {
                store.add(t.name.clone(), Tensor::new(t.shape.clone(), t.values())?, false)?;
            }
            return Ok(store);
        }
        eprintln!("pretraining backbones (cached at {})", path.display());
        let (store, report) = pretrain_backbones::<f32>(&self.enc, &self.dec, &self.spec, &self.cfg.pretrain)?;
        eprintln!(
            "pretraining done: encoder loss {:.4}, decoder loss {:.4}",
            report.encoder_loss.last().copied().unwrap_or(f64::NAN),
            report.decoder_loss.last().copied().unwrap_or(f64::NAN)
        );
        std::fs::create_dir_all(&self.cfg.output.backbone_cache)?;
        let tmp = path.with_extension("tmp");
        save_checkpoint(&store, &tmp, false)?;
        std::fs::rename(&tmp, &path)?;
        Ok(store)
    }

    /// The variant with pretrained backbones and freshly initialized trainables.
    pub fn model(&self) -> Result<EpalmModel<f32>> {
        let mut model = EpalmModel::new(&self.enc, &self.dec, &self.variant, &RngState::new(self.cfg.train.seed))?;
        model.load_backbones(&self.backbones()?)?;
        Ok(model)
    }

    pub fn prepare(&self, model: &EpalmModel<f32>, file: &str) -> Result<Vec<PreparedExample<f32>>> {
        let examples = read_jsonl(&self.cfg.data.dir.join(file))?;
        epalm_core::train::prepare_examples(model, &examples, &self.vocab, self.spec.task)
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Trains the configured variant; writes metrics, checkpoints and the resolved config.
pub fn train(cfg: ExperimentConfig) -> CmdResult<TrainOutcome> {
    Ok(train_model(cfg)?.1)
}

/// [`train`], also returning the trained model.
pub fn train_model(cfg: ExperimentConfig) -> CmdResult<(EpalmModel<f32>, TrainOutcome)> {
    let setup = Setup::new(cfg)?;
    let out = setup.cfg.output.dir.clone();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    std::fs::write(out.join(RESOLVED_CONFIG), setup.cfg.to_flat()?).map_err(Error::from)?;
    let mut model = setup.model()?;
    let examples = read_jsonl(&setup.cfg.data.dir.join(TRAIN_FILE))?;
    let examples = if setup.cfg.data.fraction < 1.0 {
        subsample_fraction(&examples, setup.cfg.data.fraction, setup.cfg.train.seed)?
    } else {
        examples
    };
    eprintln!(
        "training {} on {} examples for {} epochs",
        setup.variant.name,
        examples.len(),
        setup.cfg.train.epochs
    );
    let train = epalm_core::train::prepare_examples(&model, &examples, &setup.vocab, setup.spec.task)?;
    let val = setup.prepare(&model, VAL_FILE)?;
    let outcome = train_run(
        &mut model,
        &train,
        &val,
        &setup.vocab,
        setup.spec.task,
        &setup.cfg.train_config(),
        &RunFiles::in_dir(&out),
    )?;
    Ok((model, outcome))
}

pub const EVAL_REPORT: &str = "eval_metrics.json";
pub const PREDICTIONS: &str = "predictions.jsonl";

/// Loads `checkpoint` into the configured model and evaluates the val split.
pub fn eval(cfg: ExperimentConfig, checkpoint: &Path) -> CmdResult<MetricReport> {
    let setup = Setup::new(cfg)?;
    let mut model = setup.model()?;
    let meta_file = meta_path(checkpoint);
    if meta_file.exists() {
        let text = std::fs::read_to_string(&meta_file).map_err(Error::from)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| fail(EXIT_MISMATCH, format!("{}: {e}", meta_file.display())))?;
        let want = serde_json::to_value(&setup.variant).map_err(Error::from)?;
        if meta.variant != want {
            return Err(fail(
                EXIT_MISMATCH,
                format!("{} was written by a different variant configuration", checkpoint.display()),
            ));
        }
    }
    let tensors = read_checkpoint(checkpoint)?;
    let missing: Vec<String> = model
        .params
        .trainable_names()
        .into_iter()
        .filter(|n| !tensors.iter().any(|t| &t.name == n))
        .collect();
    if !missing.is_empty() {
        return Err(fail(
            EXIT_MISMATCH,
            format!("{} lacks trainable parameter(s) {missing:?}", checkpoint.display()),
        ));
    }
    load_into(&tensors, &mut model.params)?;
    let val = setup.prepare(&model, VAL_FILE)?;
    let (report, preds) = evaluate_split(&model, &val, &setup.vocab, &setup.cfg.decode.config())?;
    let out = &setup.cfg.output.dir;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    write_predictions(&out.join(PREDICTIONS), &preds)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub variant: VariantName,
    pub encoder: String,
    pub decoder: String,
    pub prompt_mlp: bool,
    pub trainable_count: u64,
    pub frozen_count: u64,
    pub total: u64,
    pub fraction: f64,
    pub percent: f64,
    pub per_group: std::collections::BTreeMap<String, epalm_core::adapt::GroupCount>,
}

/// Exact trainable and frozen counts for a variant on reference-size backbones.
pub fn count(variant: &str, encoder: &str, decoder: &str, prompt_mlp: Option<bool>) -> CmdResult<CountReport> {
    let name: VariantName = variant.parse().map_err(|_| {
        let all: Vec<&str> = VariantName::ALL.iter().map(|v| v.as_str()).collect();
        fail(EXIT_USAGE, format!("unknown variant {variant:?}; choose one of {}", all.join(", ")))
    })?;
    let enc = encoder_preset(encoder).map_err(|_| {
        fail(EXIT_USAGE, format!("unknown encoder preset {encoder:?}; choose one of {}", ENCODER_PRESETS.join(", ")))
    })?;
    let dec = decoder_preset(decoder).map_err(|_| {
        fail(EXIT_USAGE, format!("unknown decoder preset {decoder:?}; choose one of {}", DECODER_PRESETS.join(", ")))
    })?;
    let mut spec = VariantSpec::preset(name);
    if let Some(mlp) = prompt_mlp {
        spec = spec.with_prompt_mlp(mlp);
    }
    let (_, layout) = EpalmArch::declare(&enc, &dec, &spec)?;
    let b: ParamBudget = count_params(&layout);
    Ok(CountReport {
        variant: name,
        encoder: encoder.into(),
        decoder: decoder.into(),
        prompt_mlp: spec.prompt.map_or(false, |p| p.with_mlp),
        trainable_count: b.trainable_count,
        frozen_count: b.frozen_count,
        total: b.total(),
        fraction: b.fraction,
        percent: b.percent(),
        per_group: b.per_group,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub variant: VariantName,
    pub dims: String,
    pub tolerance: f64,
    pub passed: bool,
    pub report: GradCheckReport,
}

/// Finite-difference check of a variant's gradients; exit 5 on failure.
pub fn grad_check(variant: &str, dims: &str, corrupt: Option<f64>) -> CmdResult<GradCheckSummary> {
    let name: VariantName = variant.parse().map_err(|e: Error| fail(EXIT_USAGE, e.to_string()))?;
    let opts = GradCheckOptions {
        corrupt_analytic: corrupt,
        ..GradCheckOptions::default()
    };
    let report = grad_check_variant(&VariantSpec::preset(name), dims, 0, &opts)?;
    Ok(GradCheckSummary {
        variant: name,
        dims: dims.into(),
        tolerance: GRAD_CHECK_TOL,
        passed: report.max_rel_error < GRAD_CHECK_TOL,
        report,
    })
}

/// Prints `value` as pretty JSON on stdout.
pub fn print_json<S: Serialize>(value: &S) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(Error::from)?;
    Ok(())
}
