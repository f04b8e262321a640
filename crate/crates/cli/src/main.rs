//! `hmrn`: preprocess, train, evaluate and query HMResNet activity models.

mod config;
mod data;
mod eval;
mod fail;
mod gradcheck;
mod predict;
mod preprocess;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmrn_core::metrics::ReportFormat;

use config::ExperimentConfig;
use fail::{validation, CliResult, Failure};

const AFTER_HELP: &str = "\
Configuration:
  --config names a JSON document with sections dataset, model, training and
  output. Any leaf field can be overridden from the environment with
  HMRN_<SECTION>__<FIELD>, nested fields joined by '__', for example
  HMRN_TRAINING__EPOCHS=20 or HMRN_DATASET__SPLIT__GROUPING=by-window.
  Values are parsed as JSON when possible and used as strings otherwise.
  Relative paths resolve against the config file's directory.

Exit codes:
  0 success, 1 internal error, 2 usage error, 3 unreadable or malformed
  input, 4 validation error, 5 check failure";

#[derive(Parser, Debug)]
#[command(name = "hmrn", version, about = "HMResNet human activity recognition toolkit", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON)
    #[arg(long, global = true, env = "HMRN_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides training.seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output format for reports and predictions
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// Report wall-clock timings (and keep them in the training log)
    #[arg(long, global = true)]
    timing: bool,

    /// k-fold evaluation: train and test once per fold
    #[arg(long, global = true)]
    folds: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, window and normalize the configured dataset into data_dir
    Preprocess,
    /// Train a model on the preprocessed train split
    Train,
    /// Evaluate a trained model on the test split, or run k-fold evaluation
    Eval {
        /// Model file (default: output.model)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset file (default: <data_dir>/test.hmrd)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify windows from a dataset file or a text file of windows
    Predict {
        /// Model file (default: output.model of --config)
        #[arg(long)]
        model: Option<PathBuf>,
        /// `.hmrd` dataset file, or text with one window per line
        /// (channel-major, comma or whitespace separated)
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of every layer and a tiny end-to-end model
    Gradcheck {
        /// Model size for the end-to-end check
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Test hook: corrupt the analytic gradient of one layer
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| validation(anyhow::anyhow!("this command needs --config")))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    if cli.folds.is_some() && !matches!(cli.command, Command::Eval { .. }) {
        return Err(validation(anyhow::anyhow!("--folds only applies to eval")));
    }
    let format = ReportFormat::from(cli.format);
    match &cli.command {
        Command::Preprocess => preprocess::run(&load_config(&cli)?),
        Command::Train => train::run(&load_config(&cli)?, cli.timing),
        Command::Eval { model, data } => {
            let cfg = load_config(&cli)?;
            match cli.folds {
                Some(k) => eval::run_folds(&cfg, k, format, cli.timing),
                None => eval::run(&cfg, model.as_deref(), data.as_deref(), format),
            }
        }
        Command::Predict { model, input } => {
            let model = match model {
                Some(m) => m.clone(),
                None => load_config(&cli)?.output.model,
            };
            predict::run(&model, input, format, cli.timing)
        }
        Command::Gradcheck { preset, corrupt } => gradcheck::run(preset, cli.seed.unwrap_or(0), corrupt.clone(), format, cli.timing),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
