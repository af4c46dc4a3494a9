use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cohortsim_core::Error as CoreError;

mod commands;
mod config;

use config::RunConfig;

/// Error that carries its own exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn contract(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

/// 0 ok, 1 bad input or contract violation, 2 numerical divergence, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Divergence { .. } => 2,
                CoreError::Io { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if matches!(e.kind(), csv::ErrorKind::Io(_)) { 3 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
            return if e.is_io() { 3 } else { 1 };
        }
    }
    1
}

#[derive(Debug, Parser)]
#[command(name = "cohortsim", version, about = "Train recurrent word-recognition models and run visual world simulations")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, env = "COHORTSIM_CONFIG")]
    config: Option<PathBuf>,
    /// Run a single model seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Use synthetic targets instead of extracted embeddings.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the phone table, lexicon and representation files.
    Validate,
    /// Build the 250-bit targets and write them to the output directory.
    Prepare,
    /// Train one model per seed.
    Train,
    /// Build visual world trials and record activation time courses.
    Simulate,
    /// Summarise a finished run.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(epochs) = cli.epochs {
        cfg.trainer.epochs = epochs;
        if epochs > 0 {
            cfg.trainer.eval_every = cfg.trainer.eval_every.min(epochs);
        }
    }
    if cli.synthetic {
        cfg.synthetic.enabled = true;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Validate => commands::validate(&cfg),
        Command::Prepare => commands::prepare_reps(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
