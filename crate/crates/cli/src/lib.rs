//! Command-line harness and HTTP service for velocity-intervention editing.
//!
//! The `velomask` binary is a thin wrapper around [`run`]. Every subcommand
//! is deterministic given its flags: seeds are explicit and all outputs are
//! written in a fixed order and format.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod ablation;
pub mod commands;
pub mod files;
pub mod pgm;
pub mod server;

pub use ablation::{ablate, AblationParam, AblationRow};
pub use commands::ModelSource;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid flags or configuration.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<velomask::Error> for CliError {
    fn from(e: velomask::Error) -> Self {
        match e {
            velomask::Error::InvalidConfig { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "velomask", version, about = "Velocity-intervention editing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic edit-task suite.
    GenTasks(GenTasksArgs),
    /// Train the toy velocity network on a task directory.
    Train(TrainArgs),
    /// Run the intervention sampler on one task.
    Edit(EditArgs),
    /// Run the plain sampler (no intervention) on one task.
    Baseline(BaselineArgs),
    /// Sample one edit per strength and score the trajectory.
    Sweep(SweepArgs),
    /// Vary tau or N over a task suite and tabulate suite-averaged metrics.
    Ablate(AblateArgs),
    /// Serve tasks, edits and sweeps over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    /// Grid shape as CxHxW.
    #[arg(long, default_value = "1x16x16", value_parser = parse_shape)]
    pub shape: velomask::Shape,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by gen-tasks.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub learning_rate: f64,
    #[arg(long)]
    pub batch_size: usize,
    #[arg(long)]
    pub iterations: usize,
    #[arg(long)]
    pub seed: u64,
    /// Probability of drawing a null-instruction (reconstruction) pair.
    #[arg(long)]
    pub null_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// A model file written by `train`.
    #[arg(long, conflicts_with = "analytic", required_unless_present = "analytic")]
    pub model: Option<PathBuf>,
    /// Use the exact point-mass edit model of each task.
    #[arg(long)]
    pub analytic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    /// Sampling steps T.
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    /// Intervened initial steps N.
    #[arg(long, default_value_t = 1)]
    pub intervene: usize,
    /// Similarity threshold; defaults to 0.4 for edits and 0.8 for sweeps.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = velomask::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// A task JSON file.
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Comma-separated edit strengths.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub strengths: Option<Vec<f64>>,
    /// Accept strengths outside (0, 1].
    #[arg(long)]
    pub allow_extrapolation: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub param: AblationParam,
    /// Comma-separated grid; defaults to 0,0.2,..,1 for tau and 1..=T for n.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_delimiter = ',')]
    pub strengths: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub tasks: PathBuf,
}

impl ValueEnum for AblationParam {
    fn value_variants<'a>() -> &'a [Self] {
        &[AblationParam::Tau, AblationParam::N]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Parses `CxHxW`.
pub fn parse_shape(text: &str) -> Result<velomask::Shape, String> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected CxHxW, got {text:?}"))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(velomask::Shape::new(c, h, w)),
        _ => Err(format!("expected three positive dimensions CxHxW, got {text:?}")),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status; messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
