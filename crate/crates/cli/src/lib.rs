//! `vitprune` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<vitprune_core::Error> for CliError {
    fn from(e: vitprune_core::Error) -> Self {
        match e {
            vitprune_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vitprune",
    about = "Reinforcement-learned token pruning for Vision Transformers",
    after_help = "Any config field can be set with --section.key=value, e.g. --train.k=15 --reward.alpha=0.3.\n\
                  Sections: vit, train, reward, pretrain, data, output, checkpoint, sweep, bench, visualize."
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (same as --output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint manifest to load (same as --checkpoint.load).
    #[arg(long, global = true)]
    load: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised training of the unpruned ViT.
    Pretrain,
    /// Alternating policy optimization and ViT fine-tuning.
    Train {
        /// Enable fine-tuning epochs (same as --train.finetune_enabled).
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        finetune: Option<bool>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval,
    /// Train one policy per alpha/beta ratio and write sweep.csv.
    Sweep,
    /// Single-image throughput with and without token compaction.
    Bench {
        /// Token count including the class token (same as --bench.tokens).
        #[arg(long)]
        tokens: Option<usize>,
        /// Comma-separated retention targets (same as --bench.retention).
        #[arg(long)]
        retention: Option<String>,
        /// Timed trials per row (same as --bench.trials).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Write PGM images of the pruning masks for the first test images.
    Visualize,
}

/// Splits `--section.key=value` and `--section.key value` overrides from the
/// arguments clap understands.
/// `(section.key, raw value)` pairs taken from the command line.
type Overrides = Vec<(String, String)>;

fn split_overrides(argv: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        let Some(body) = s.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .map(|v| v.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    match try_run(argv.into_iter().map(Into::into).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn try_run(argv: Vec<OsString>) -> Result<(), CliError> {
    let (argv, mut overrides) = split_overrides(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    if let Some(out) = &cli.out {
        overrides.push(("output.dir".into(), out.display().to_string()));
    }
    if let Some(load) = &cli.load {
        overrides.push(("checkpoint.load".into(), load.display().to_string()));
    }
    match &cli.command {
        Command::Train { finetune: Some(f) } => overrides.push(("train.finetune_enabled".into(), f.to_string())),
        Command::Bench {
            tokens,
            retention,
            trials,
        } => {
            if let Some(t) = tokens {
                overrides.push(("bench.tokens".into(), t.to_string()));
            }
            if let Some(r) = retention {
                overrides.push(("bench.retention".into(), r.clone()));
            }
            if let Some(t) = trials {
                overrides.push(("bench.trials".into(), t.to_string()));
            }
        }
        _ => {}
    }
    // Path-valued overrides are plain strings, never JSON.
    for (k, v) in overrides.iter_mut() {
        if (k.ends_with("dir") || k == "checkpoint.load") && !v.starts_with('"') {
            *v = serde_json::to_string(v).expect("string serializes");
        }
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Bench { .. } => commands::bench(&cfg),
        Command::Visualize => commands::visualize(&cfg),
    }
}
