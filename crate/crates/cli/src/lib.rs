//! Command-line driver: speedup sweeps, tau measurement, training, cost
//! reports and critical batch sizes.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::error::{CliError, CliResult};
use crate::output::{emit, write_manifest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "specdec-lab", version, about = "Speculative decoding throughput model and desk-scale draft training")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; CSV goes to stdout when omitted. For `train`, replaces
    /// the checkpoint path of the run chosen with `--run`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train only the named run.
    #[arg(long)]
    pub run: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress training progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Sweep,
    Tau,
    Report,
    Train,
    Critical,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Tau => "tau",
            Command::Report => "report",
            Command::Train => "train",
            Command::Critical => "critical",
        }
    }
}

/// Caps the global thread pool at `SPECDEC_LAB_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("SPECDEC_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::schema("SPECDEC_LAB_THREADS", format!("expected a positive integer, got '{raw}'")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    let loaded = config::load(&cli.config)?;
    let out = cli.out.as_deref();
    let seed = match cli.command {
        Command::Sweep => {
            emit(out, &commands::sweep::run(&loaded)?)?;
            cli.seed.unwrap_or(0)
        }
        Command::Critical => {
            emit(out, &commands::critical::run(&loaded)?)?;
            cli.seed.unwrap_or(0)
        }
        Command::Report => {
            let rows = commands::report::rows(&loaded)?;
            print!("{}", commands::report::text(&rows));
            if let Some(path) = out {
                std::fs::write(path, commands::report::csv(&rows)?)?;
            }
            cli.seed.unwrap_or(0)
        }
        Command::Tau => {
            emit(out, &commands::tau::run(&loaded, cli.seed)?)?;
            cli.seed
                .or_else(|| loaded.config.specdec.eval.as_ref().map(|e| e.seed))
                .unwrap_or(0)
        }
        Command::Train => {
            let done = commands::train::run(&loaded, cli.run.as_deref(), out, cli.seed, !cli.quiet)?;
            for t in &done {
                write_manifest(&t.path, &RunManifest::new("train", &loaded.bytes, t.seed))?;
                if !cli.quiet {
                    eprintln!("wrote {}", t.path.display());
                }
            }
            return Ok(());
        }
    };
    if let Some(path) = out {
        write_manifest(path, &RunManifest::new(cli.command.name(), &loaded.bytes, seed))?;
    }
    Ok(())
}
