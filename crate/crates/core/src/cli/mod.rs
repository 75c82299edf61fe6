//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or malformed input, 2 I/O failure,
//! 3 numeric failure.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::Error;

pub use config::{load_run_config, DataConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "pitchflow", version, about = "Style-following F0 generation by masked infilling")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a training/evaluation corpus.
    Synth(SynthArgs),
    /// Extract a note score from a pitch file.
    ExtractNotes(ExtractArgs),
    /// Train the velocity model (both phases).
    Train(TrainArgs),
    /// Pitch correction of an off-key take toward target notes.
    Apc(ApcArgs),
    /// Generate pitch for a score in the style of a reference.
    Svs(SvsArgs),
    /// Regenerate a source performance in the style of a reference.
    Svc(SvcArgs),
    /// Melody accuracy and vibrato probes of estimated against reference curves.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of examples.
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Pitch file (.json, or .csv at `data.csv_frame_rate_hz`).
    pub pitch: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Skip activation blur and short-event cleanup.
    #[arg(long)]
    pub no_smoothing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many steps are complete, leaving a resumable checkpoint.
    #[arg(long, value_name = "STEP")]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory (e.g. `<train-out>/model`).
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Output pitch JSON for the generated segment.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write an SVG overlay.
    #[arg(long, value_name = "FILE")]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApcArgs {
    /// Off-key take.
    #[arg(long, value_name = "FILE")]
    pub off: PathBuf,
    /// Intended notes on the take's timeline.
    #[arg(long, value_name = "FILE")]
    pub notes: PathBuf,
    #[command(flatten)]
    pub gen: GenerateArgs,
}

#[derive(Debug, Args)]
pub struct SvsArgs {
    /// Reference performance supplying the style; omit for no context.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    /// Notes of the reference; extracted from its pitch when omitted.
    #[arg(long, value_name = "FILE")]
    pub reference_notes: Option<PathBuf>,
    /// Target score.
    #[arg(long, value_name = "FILE")]
    pub notes: PathBuf,
    /// Target length in frames; defaults to the last note offset.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Pitch file whose voicing marks unvoiced target frames.
    #[arg(long, value_name = "FILE")]
    pub voicing: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenerateArgs,
}

#[derive(Debug, Args)]
pub struct SvcArgs {
    /// Reference performance supplying the style; omit for no context.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    /// Source performance whose notes and timing are kept.
    #[arg(long, value_name = "FILE")]
    pub source: PathBuf,
    #[command(flatten)]
    pub gen: GenerateArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated curves, `<id>.pitch.json` or `<id>.pitch.csv`.
    #[arg(long, value_name = "DIR")]
    pub est: PathBuf,
    /// Reference curves with the same ids.
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: PathBuf,
    /// `<id>.notes.json` for the vibrato probes; falls back to the reference
    /// directory, then to extraction from the reference pitch.
    #[arg(long, value_name = "DIR")]
    pub notes: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
