//! `asyncflow` command-line tool: synthesis, training, forecasting,
//! evaluation and schedule inspection.
//!
//! Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.

mod predict;
mod schedule_cmd;
mod synth_cmd;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use asyncflow::forecast::SolverKind;
use asyncflow::schedule::ScheduleKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "asyncflow", version, about = "Asynchronous flow matching for event sequences")]
struct Cli {
    /// Worker threads for per-sequence work (1 keeps runs reproducible by construction).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    Hawkes,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Next,
    Horizon,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Next => "next",
            Task::Horizon => "horizon",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic dataset.
    Synth(synth_cmd::SynthArgs),
    /// Train the event autoencoder.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Train the denoiser on latents of a frozen autoencoder.
    TrainDm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Forecast events for every sequence of a dataset.
    Predict(predict::PredictArgs),
    /// Score a prediction file against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect noise schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
}

#[derive(Subcommand, Debug)]
enum ScheduleAction {
    /// Write `s, a_1..a_N` on a uniform grid plus every breakpoint.
    Dump {
        #[arg(long, value_parser = parse_kind)]
        kind: ScheduleKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1001)]
        grid: usize,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate the schedule, its field equivalence and the inverse flow.
    Check {
        #[arg(long, value_parser = parse_kind)]
        kind: ScheduleKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2001)]
        grid: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the schedule so that validation must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

pub fn parse_kind(s: &str) -> Result<ScheduleKind, String> {
    s.parse::<ScheduleKind>().map_err(|e| e.to_string())
}

pub fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse::<SolverKind>().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> asyncflow::Result<()> {
    if cli.threads == 0 {
        return Err(asyncflow::Error::Validation("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Synth(args) => synth_cmd::run(&args),
        Command::TrainVae { config, out, log_every } => train::train_vae_cmd(&config, &out, log_every),
        Command::TrainDm { config, vae, out, log_every } => train::train_dm_cmd(&config, &vae, &out, log_every),
        Command::Predict(args) => predict::run(&args, cli.threads),
        Command::Eval { pred, data, out } => predict::eval(&pred, &data, &out),
        Command::Schedule { action } => match action {
            ScheduleAction::Dump { kind, n, grid, out } => schedule_cmd::dump(kind, n, grid, out.as_deref()),
            ScheduleAction::Check { kind, n, grid, samples, seed, inject_fault } => {
                schedule_cmd::check(kind, n, grid, samples, seed, inject_fault)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
