//! Command-line runner: synthetic data, calibration profiles, the training
//! regimes, guided adaptation and reports, each driven by one
//! [`ExperimentConfig`](config::ExperimentConfig) plus flag overrides.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result, EXIT_RUNTIME, EXIT_USAGE};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "METADOMAIN_OUT";

#[derive(Debug, Parser)]
#[command(name = "metadomain", version, about = "Calibration-guided domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `<output_dir>/<command>` with
    /// `output_dir` from the config, then `$METADOMAIN_OUT/<command>`, then
    /// `./runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Schedule {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of the training split to keep, in (0, 1].
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic two-domain benchmark (PNG images + manifests).
    Synth {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute a calibration profile from manifests.
    Calibrate {
        /// Comma-separated manifests.
        #[arg(long, value_delimiter = ',')]
        manifest: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pre-training.
    Pretrain {
        /// Comma-separated manifests of the domain.
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        /// Start from this checkpoint instead of random weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        views: Option<usize>,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training: naive, finetune or finetune_random_augment.
    Train {
        #[arg(long)]
        regime: Option<String>,
        /// Comma-separated manifests of the domain.
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        /// Checkpoint to fine-tune (required by the finetune regimes).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Guided adaptation of a source checkpoint to a target domain.
    Adapt {
        #[arg(long, required = true)]
        source_checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        source: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        target: Vec<PathBuf>,
        #[arg(long)]
        label_map: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        inner_lr: Option<f64>,
        #[arg(long)]
        calibration_fraction: Option<f64>,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Clean metrics, confusion matrix and the degradation suite.
    Evaluate {
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// `default`, `none`, or comma-separated `kind@severity` entries.
        #[arg(long, default_value = "default")]
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Forgetting matrix: every checkpoint on every domain.
    Report {
        /// Comma-separated checkpoints in training order.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated manifests of one domain; repeat per domain.
        #[arg(long = "domain")]
        domains: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Calibrate { .. } => "calibrate",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Adapt { .. } => "adapt",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(out) => {
            println!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
