//! Command-line front end: `train`, `sweep-replacement`, `account`,
//! `verify`, and `eval` over the core library, with stable exit codes so
//! scripts can tell configuration, data, and numeric failures apart.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort,
/// 5 verification failure, 1 internal.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Verify(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Verify(m) => write!(f, "verification failure: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Verify(_) => 5,
        }
    }

    /// Classifies a core error raised while handling external data.
    pub fn from_data_phase(e: atacnet::Error) -> CliError {
        match e {
            atacnet::Error::NonFinite(m) => CliError::Numeric(m),
            atacnet::Error::Data(m) => CliError::Data(m),
            atacnet::Error::Io(m) => CliError::Data(m.to_string()),
            atacnet::Error::Checkpoint(m) => CliError::Data(m),
            other => CliError::Data(other.to_string()),
        }
    }

    /// Classifies a core error raised while building from configuration.
    pub fn from_config_phase(e: atacnet::Error) -> CliError {
        match e {
            atacnet::Error::NonFinite(m) => CliError::Numeric(m),
            atacnet::Error::Io(m) => CliError::Data(m.to_string()),
            atacnet::Error::Data(m) => CliError::Data(m),
            other => CliError::Config(other.to_string()),
        }
    }

    /// Classifies a core error raised mid-training.
    pub fn from_run_phase(e: atacnet::Error) -> CliError {
        match e {
            atacnet::Error::NonFinite(m) => CliError::Numeric(m),
            atacnet::Error::Io(m) => CliError::Data(m.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "atacnet",
    version,
    about = "Attentional-activation networks: training, replacement sweeps, cost accounting, verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file.
    Train {
        /// Path to the flat key = value config file.
        config: PathBuf,
        /// Overrides mirroring config keys, e.g. `seed=3 epochs=40`.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one run per replacement ratio and summarize cost vs accuracy.
    SweepReplacement {
        config: PathBuf,
        /// Comma-separated replacement ratios in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Static parameter and MAC-FLOP accounting with a per-stage breakdown.
    Account {
        /// resnet20v2 | resnet50 | resnet50v1b | atac-resnet50
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 3)]
        blocks: usize,
        #[arg(long, default_value = "relu")]
        activation: String,
        #[arg(long, default_value_t = 0.0)]
        ratio: f64,
        #[arg(long, default_value_t = 2)]
        reduction: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Run the full invariant suite (gradchecks, locality, parity, parsers).
    Verify,
    /// Evaluate a checkpoint on the dataset named by a config file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Parses arguments and runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success; usage errors
            // land on stderr with the config-error code
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train { config, overrides } => commands::cmd_train(&config, &overrides),
        Command::SweepReplacement {
            config,
            ratios,
            overrides,
        } => commands::cmd_sweep_replacement(&config, &ratios, &overrides),
        Command::Account {
            model,
            blocks,
            activation,
            ratio,
            reduction,
            classes,
        } => commands::cmd_account(&model, blocks, &activation, ratio, reduction, classes),
        Command::Verify => commands::cmd_verify(),
        Command::Eval {
            checkpoint,
            config,
            overrides,
        } => commands::cmd_eval(&checkpoint, &config, &overrides),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
