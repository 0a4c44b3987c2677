//! Command-line front end: config-driven training, classification,
//! generation, replay export and the oracle self-test.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod selftest;
pub mod tensor;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dppvae_core::Error as CoreError;
use serde_json::Value;

pub use commands::Invocation;
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0} self-test checks failed")]
    SelftestFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::SelftestFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidConfig(_) | CoreError::InvalidParams(_) => CliError::Config(msg),
            CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::BadMagic { .. }
            | CoreError::TruncatedFile(_)
            | CoreError::DimensionMismatch(_)
            | CoreError::InsufficientSamples { .. }
            | CoreError::UnknownWindow { .. }
            | CoreError::SingleClass
            | CoreError::TooFewSamples(_)
            | CoreError::Format(_) => CliError::Data(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dppvae", version, about = "VAE and DPP-VAE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `KEY=VALUE` with a dotted key path; VALUE is parsed as JSON when it can be.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a VAE or DPP-VAE and write a checkpoint and loss history.
    Train(RunArgs),
    /// Classify latent means of a trained model.
    Classify(RunArgs),
    /// Decode prior draws and audit their class balance.
    Generate(RunArgs),
    /// Export replay frames over the trial timeline.
    Replay(RunArgs),
    /// Run the oracle checks.
    Selftest {
        #[arg(long, hide = true)]
        perturb_lambda: Option<f64>,
    },
}

impl RunArgs {
    /// Loads the config with `--seed`/`--out` folded in as overrides.
    pub fn invocation(&self) -> Result<Invocation, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", Value::String(out.display().to_string())));
        }
        let config = ExperimentConfig::load(&self.config, &overrides)?;
        Ok(Invocation { config, overrides })
    }
}

/// Runs one command; returns the run directory (none for `selftest`).
pub fn run(command: &Command) -> Result<Option<PathBuf>, CliError> {
    match command {
        Command::Train(a) => commands::cmd_train(&a.invocation()?).map(Some),
        Command::Classify(a) => commands::cmd_classify(&a.invocation()?).map(Some),
        Command::Generate(a) => commands::cmd_generate(&a.invocation()?).map(Some),
        Command::Replay(a) => commands::cmd_replay(&a.invocation()?).map(Some),
        Command::Selftest { perturb_lambda } => {
            let checks = selftest::run_all(*perturb_lambda);
            print!("{}", selftest::report(&checks));
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(None),
                n => Err(CliError::SelftestFailed(n)),
            }
        }
    }
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(Some(dir)) => {
            println!("{}", dir.display());
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
