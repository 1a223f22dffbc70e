//! Command-line pipeline: simulate a phantom cohort, preprocess it into
//! per-ablation datasets, train, predict, evaluate, grade and report.

pub mod artifacts;
pub mod config;
pub mod stages;
pub mod workspace;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use artifacts::{emit_csv, export_image, fmt_f64, read_csv, read_pgm};
pub use config::{default_ablations, parse_config, Ablation, ExperimentConfig};
pub use workspace::{Workspace, WorkspaceLock};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: `{key}`: {message}")]
    Config { line: usize, key: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("missing {what} at {path}; run `{stage}` first")]
    MissingArtifact { what: &'static str, path: PathBuf, stage: &'static str },
    #[error("{what} at {path} was built from a different configuration; run `{stage}` again")]
    Stale { what: &'static str, path: PathBuf, stage: &'static str },
    #[error("workspace is locked by another invocation ({0}); remove the file if no other run is active")]
    Locked(PathBuf),
    #[error("image: {0}")]
    Image(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{0} self-test check(s) failed")]
    Selftest(usize),
    #[error(transparent)]
    Phantom(#[from] tracernet_core::phantom::PhantomError),
    #[error(transparent)]
    Preprocess(#[from] tracernet_core::preprocess::PreprocessError),
    #[error(transparent)]
    Train(#[from] tracernet_core::trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] tracernet_core::evaluator::EvalError),
    #[error(transparent)]
    Network(#[from] tracernet_core::unet::UNetError),
    #[error(transparent)]
    Tensor(#[from] tracernet_core::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "tracernet", version, about = "Predict 24 h CSF tracer images from earlier scans on phantom cohorts")]
pub struct Cli {
    /// Flat `key = value` configuration file; defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `paths.workspace`.
    #[arg(long, global = true, value_name = "PATH")]
    pub workspace: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Restricts the stage to one ablation.
    #[arg(long, global = true, value_name = "NAME")]
    pub label: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the phantom cohort.
    Simulate,
    /// Normalize and split the cohort into one dataset per ablation.
    Preprocess,
    /// Train one network per ablation.
    Train,
    /// Run trained networks on both splits.
    Predict,
    /// Compute error metrics and difference maps.
    Evaluate,
    /// Grade reflux on real and predicted 24 h images.
    Grade,
    /// Collect metrics of all runs into one table.
    Report,
    /// Run the gradient checks and the convolution oracle.
    Selftest,
}

/// Resolves the configuration from the file and flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(ws) = &cli.workspace {
        cfg.workspace = ws.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    if let Some(label) = &cli.label {
        cfg.ablation(label)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.command == Command::Selftest {
        return stages::selftest();
    }
    let ws = Workspace::new(&cfg.workspace);
    let _lock = ws.lock()?;
    let label = cli.label.as_deref();
    match cli.command {
        Command::Simulate => stages::simulate(&cfg, &ws),
        Command::Preprocess => stages::preprocess(&cfg, &ws, label),
        Command::Train => stages::train(&cfg, &ws, label),
        Command::Predict => stages::predict(&cfg, &ws, label),
        Command::Evaluate => stages::evaluate(&cfg, &ws, label).map(|_| ()),
        Command::Grade => stages::grade(&cfg, &ws, label).map(|_| ()),
        Command::Report => stages::report(&cfg, &ws).map(|_| ()),
        Command::Selftest => unreachable!(),
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn dispatch<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
