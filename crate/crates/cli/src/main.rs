//! `rvlad`: train vocabularies, encode, match and evaluate region-VLAD runs.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Knobs;

#[derive(Debug, Parser)]
#[command(name = "rvlad", version, about = "Region-based VLAD visual place recognition")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(flatten)]
    knobs: Knobs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a regional vocabulary from the tensors of a manifest.
    BuildVocab(commands::BuildVocab),
    /// Encode one traverse of a manifest into a VLAD store.
    Encode(commands::Encode),
    /// Score every query descriptor against every reference descriptor.
    Match(commands::Match),
    /// Precision-recall evaluation of a results CSV, with optional thresholding.
    Evaluate(commands::Evaluate),
    /// Per-stage timing over the images of a manifest.
    Timing(commands::Timing),
    /// Write a synthetic dataset (tensors plus manifest).
    Synth(commands::Synth),
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn missing(what: &str, path: &std::path::Path) -> Self {
        Self::user(format!("{what} not found: {}", path.display()))
    }
}

impl From<region_vlad::Error> for CliError {
    fn from(e: region_vlad::Error) -> Self {
        Self {
            code: if e.is_user_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

/// Emits one `key=value` log line on stderr.
#[macro_export]
macro_rules! log {
    ($event:expr $(, $key:ident = $value:expr)* $(,)?) => {{
        let mut line = format!("event={}", $event);
        $(
            let value = format!("{}", $value);
            if value.contains(char::is_whitespace) || value.is_empty() {
                line.push_str(&format!(" {}={:?}", stringify!($key), value));
            } else {
                line.push_str(&format!(" {}={}", stringify!($key), value));
            }
        )*
        eprintln!("{line}");
    }};
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolved = cli.knobs.resolve(cli.workers)?;
    let workers = resolved
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError { code: 1, message: format!("worker pool: {e}") })?;
    log!("start", workers = workers);
    let cfg = resolved.pipeline;
    pool.install(|| match cli.command {
        Command::BuildVocab(args) => args.run(&cfg),
        Command::Encode(args) => args.run(&cfg),
        Command::Match(args) => args.run(),
        Command::Evaluate(args) => args.run(),
        Command::Timing(args) => args.run(&cfg, workers),
        Command::Synth(args) => args.run(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log!("error", code = e.code, message = e.message);
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

pub(crate) fn require_file(what: &str, path: &std::path::Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(what, path))
    }
}
