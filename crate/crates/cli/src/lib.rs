//! Command-line front end: training runs, evaluation, theory experiments,
//! scene generation and transcript replay.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use mapo::config::ConfigError;
use mapo::env::EnvError;
use mapo::optim::OptimError;
use mapo::policy::PolicyError;
use mapo::theorylab::TheoryError;

pub mod commands;
pub mod run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("corrupt run: {0}")]
    CorruptRun(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mapo", version, about = "Agentic policy optimization lab")]
pub struct Cli {
    /// Worker threads for rollouts and Monte-Carlo trials (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on fresh scenes.
    Eval(EvalArgs),
    /// Monte-Carlo theory experiments.
    Theory(TheoryArgs),
    /// Write scene records.
    SceneGen(SceneGenArgs),
    /// Re-render one trajectory of a run's final iteration.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value config file; required unless resuming.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config for the world; defaults to the run's config.txt next to the
    /// checkpoint directory, else built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[command(subcommand)]
    pub experiment: Experiment,
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    Prop1(Prop1Args),
    Prop2(Prop2Args),
    Convergence(ConvergenceArgs),
}

#[derive(Debug, Args)]
pub struct Prop1Args {
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 0.9])]
    pub rho: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 8)]
    pub g: usize,
    #[arg(long, default_value_t = 200_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write CSV here and print a summary table instead.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Prop2Args {
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.5, 0.8])]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_sem: f64,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Uncentred rewards with identical success probability per trajectory.
    #[arg(long)]
    pub raw: bool,
    /// Also measure in situ with this NeedleGrid checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 1.0])]
    pub sigma2: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 1000, 10000])]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SceneGenArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Flat (query, member) index into the final iteration's rollouts.
    #[arg(long)]
    pub index: usize,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let task = |out: &mut dyn Write| match cli.command {
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Theory(a) => commands::theory(&a, out),
        Command::SceneGen(a) => commands::scene_gen(&a, out),
        Command::Replay(a) => commands::replay(&a, out),
    };
    match cli.workers {
        Some(0) => Err(CliError::Usage("--workers must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
            let mut buf = Vec::new();
            let result = pool.install(|| task(&mut buf));
            out.write_all(&buf).map_err(CliError::io("<stdout>"))?;
            result
        }
        None => task(out),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                return 1;
            }
            let _ = write!(out, "{rendered}");
            return 0;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
