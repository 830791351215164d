//! Operator surface for the signal-control stack: scenario generation,
//! training, evaluation and artifact dumps. Every command writes a
//! `manifest.json` into its run directory, and every CSV it writes starts
//! with a `# manifest=<hash>` line.

pub mod commands;
pub mod manifest;
pub mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use tsclab_agent::{AgentError, MatrixMode};
use tsclab_core::ScenarioError;
use tsclab_nn::NnError;

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(_) | AgentError::Checkpoint(_) | AgentError::Json(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Checkpoint read failures are input errors; anything else is a fault.
pub fn checkpoint_error(path: &std::path::Path, e: NnError) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tsclab", version, about = "Multi-agent traffic-signal control with learned collaborator selection")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "TSCLAB_OUT", default_value = "tsclab-out", global = true)]
    pub out_root: PathBuf,
    /// Run directory name under the output root; defaults to the command name.
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Suppress progress lines.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a lattice scenario and its demand file.
    GenScenario(GenArgs),
    /// Train the collaborator-selection agent.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline controller.
    Eval(EvalArgs),
    /// Dump collaborator matrices or intersection embeddings.
    Dump(DumpArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Grid,
    Avenue,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(value_enum, default_value = "grid")]
    pub kind: Kind,
    #[arg(default_value_t = 4)]
    pub rows: usize,
    #[arg(default_value_t = 4)]
    pub cols: usize,
    /// Multiplies every flow rate.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Demand horizon in seconds.
    #[arg(long, default_value_t = 3600)]
    pub horizon: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scenario file written by `gen-scenario`.
    #[arg(long)]
    pub scenario: PathBuf,
    /// JSON agent configuration; its fields override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Collaborators per intersection.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// `learned`, `random-frozen` or `fixed-hop:R`.
    #[arg(long, default_value = "learned", value_parser = parse_matrix)]
    pub matrix: MatrixMode,
    /// Drop the diagonal term of the collaborator loss.
    #[arg(long)]
    pub no_diag: bool,
    /// Drop the symmetry term of the collaborator loss.
    #[arg(long)]
    pub no_sym: bool,
    /// Parallel rollout workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from a checkpoint; its configuration is used as is.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    Ftc,
    Maxpressure,
    Coslight,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Trained checkpoint; implies `--controller coslight`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerKind>,
    /// `a..b` (exclusive) or a comma-separated list.
    #[arg(long, default_value = "0..10", value_parser = parse_seeds)]
    pub seeds: Seeds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DumpKind {
    Matrix,
    Embeddings,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(value_enum)]
    pub kind: DumpKind,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "0..1", value_parser = parse_seeds)]
    pub seeds: Seeds,
}

/// An explicit seed list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        (a..b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse::<u64>().map_err(|e| format!("{s:?}: {e}"))).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("{s:?} names no seeds"));
    }
    Ok(Seeds(seeds))
}

fn parse_matrix(s: &str) -> Result<MatrixMode, String> {
    s.parse().map_err(|e: AgentError| e.to_string())
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let name = cli.name.clone().unwrap_or_else(|| {
        match &cli.command {
            Command::GenScenario(_) => "gen-scenario",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Dump(_) => "dump",
        }
        .to_string()
    });
    let dir = cli.out_root.join(name);
    std::fs::create_dir_all(&dir)?;
    match &cli.command {
        Command::GenScenario(a) => commands::gen_scenario(a, &dir),
        Command::Train(a) => commands::train(a, &dir, cli.quiet),
        Command::Eval(a) => commands::eval(a, &dir),
        Command::Dump(a) => commands::dump(a, &dir),
    }
}
