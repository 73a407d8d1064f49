use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epalm_cli::{
    count, eval, gen_data, grad_check, parse_dataset_spec, print_json, train, CmdResult, ExperimentConfig, Failure,
    EXIT_USAGE, EXIT_VERIFY,
};
use epalm_core::adapt::TASK_DIMS;
use epalm_core::error::Error;

#[derive(Parser)]
#[command(name = "epalm", version, about = "Perceptual prompt injection experiments on synthetic grid tasks")]
struct Cli {
    /// Worker threads for per-example parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset: train.jsonl, val.jsonl and manifest.json.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured variant.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Count trainable and frozen parameters on reference-size backbones.
    CountParams {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        decoder: String,
        /// Override whether the soft prompt has its MLP.
        #[arg(long)]
        prompt_mlp: Option<bool>,
    },
    /// Finite-difference check of a variant's gradients in f64.
    GradCheck {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "tiny")]
        dims: String,
        /// Scale the analytic gradient before comparing (harness self-test).
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
    },
}

fn run(cli: Cli) -> CmdResult<()> {
    if cli.threads == 0 {
        return Err(Failure {
            code: EXIT_USAGE,
            message: "--threads must be at least 1".into(),
        });
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    match cli.command {
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec = parse_dataset_spec(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let manifest = gen_data(&spec, &out)?;
            eprintln!("wrote {} train and {} val examples to {}", manifest.n_train, manifest.n_val, out.display());
            print_json(&manifest)
        }
        Command::Train { config } => {
            let outcome = train(ExperimentConfig::load(&config)?)?;
            eprintln!("best val {:.4} at epoch {}", outcome.best_val, outcome.best_epoch);
            print_json(&serde_json::json!({
                "best_val": outcome.best_val,
                "best_epoch": outcome.best_epoch,
                "steps": outcome.steps,
            }))
        }
        Command::Eval { config, checkpoint } => print_json(&eval(ExperimentConfig::load(&config)?, &checkpoint)?),
        Command::CountParams {
            variant,
            encoder,
            decoder,
            prompt_mlp,
        } => print_json(&count(&variant, &encoder, &decoder, prompt_mlp)?),
        Command::GradCheck {
            variant,
            dims,
            corrupt_backward,
        } => {
            if !TASK_DIMS.contains(&dims.as_str()) {
                return Err(Failure {
                    code: EXIT_USAGE,
                    message: format!("unknown dims {dims:?}; choose one of {}", TASK_DIMS.join(", ")),
                });
            }
            let summary = grad_check(&variant, &dims, corrupt_backward)?;
            print_json(&summary)?;
            if summary.passed {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_VERIFY,
                    message: format!(
                        "gradient check failed for {}: relative error {:.3e} in {} exceeds {:.0e}",
                        summary.variant, summary.report.max_rel_error, summary.report.worst_param, summary.tolerance
                    ),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
