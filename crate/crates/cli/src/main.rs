//! `dptok`: command-line entry point for the delay-pattern toolkit.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ModelArgs, SamplingArgs, TrainArgs};

/// A mistake in how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "dptok", version, about = "Delay-pattern tokens for multitrack MIDI")]
pub struct Cli {
    /// TOML or JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, batching and sampling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert MIDI files into token files plus a manifest
    Tokenize {
        /// MIDI file or directory
        input: PathBuf,
        /// Output directory
        #[arg(short, long)]
        output: PathBuf,
        /// Record unreadable files in the manifest instead of failing
        #[arg(long)]
        skip_bad: bool,
    },
    /// Convert token files back into MIDI
    Detokenize {
        /// Token file or directory
        input: PathBuf,
        /// Output directory (or `.mid` path for a single input file)
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Lay a token file out on the delay grid
    DpEncode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "uniform")]
        schedule: dptok_core::DelaySchedule,
    },
    /// Recover a token file from a grid file
    DpDecode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "uniform")]
        schedule: dptok_core::DelaySchedule,
    },
    /// Train a model on a directory of token files
    Train {
        /// Directory of token files
        data: PathBuf,
        /// Output directory for checkpoint, loss trace and config
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Continue the opening bars of a MIDI prompt
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt MIDI (or token) file
        #[arg(long)]
        prompt: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Prompt length in 4/4 bars of 48 ticks
        #[arg(long, default_value_t = 2)]
        bars: usize,
        /// Piano-roll image (.svg or .png); defaults to the output with .svg
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Expected schedule; fails if the checkpoint differs
        #[arg(long)]
        schedule: Option<dptok_core::DelaySchedule>,
        #[arg(long, default_value_t = 1024)]
        max_steps: usize,
        /// "full" or "incremental"
        #[arg(long, default_value = "full")]
        mode: dptok_core::DecodeMode,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Objective metrics over MIDI or token files, as CSV
    Eval {
        /// File or directory
        input: PathBuf,
        /// CSV path; stdout when omitted
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        bar_ticks: u32,
    },
    /// Notes-per-second of the delay schedule against the zero-delay one
    Bench {
        /// Directory of prompt pieces (MIDI or token files)
        prompts: PathBuf,
        /// Trained checkpoint; a freshly initialized model otherwise
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        max_steps: usize,
        /// "full", "incremental" or "both"
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        markdown: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Draw a piano roll of a MIDI or token file
    Plot {
        input: PathBuf,
        /// .svg or .png
        #[arg(short, long)]
        output: PathBuf,
        /// Bars to shade as prompt
        #[arg(long, default_value_t = 0)]
        prompt_bars: u32,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dptok_core::Error;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_) | Error::InvalidSchedule(_) => 1,
                e if e.is_data_error() => 2,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPTOK_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
