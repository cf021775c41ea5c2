//! The `mrp` command-line harness.

pub mod commands;
pub mod config;
mod failure;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mrp_core::trainer::Regime;

pub use failure::Failure;

use config::{DiagnoseFlags, ModelFlags, TaskFlags, TrainFlags};

#[derive(Parser, Debug)]
#[command(name = "mrp", version, about = "Meta-regularized prompt tuning on synthetic few-shot tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic task and print its digest.
    GenData(GenDataArgs),
    /// Train prompts on a task's base classes.
    Train(TrainArgs),
    /// Score checkpoints on a task's base and new classes.
    Eval(EvalArgs),
    /// Gradient check, Taylor scaling or alignment terms at a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Merge evaluation reports into one summary table.
    Report(ReportArgs),
    /// Generate, train and evaluate every regime over a range of seeds.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Task spec JSON; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub task: TaskFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeat to evaluate several checkpoints into one report.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// none, noise:<sigma> or rotate:<radians>; repeatable.
    #[arg(long)]
    pub shift: Vec<String>,
    /// Report JSON path; the CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: commands::Mode,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub diagnose: DiagnoseFlags,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories (holding report.json) or report files.
    #[arg(long, required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, starting at --first-seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Regimes to run; all three when omitted.
    #[arg(long = "regime")]
    pub regimes: Vec<Regime>,
    /// Evaluation shifts, comma separated (the `eval.shifts` key).
    #[arg(long, value_delimiter = ',')]
    pub shifts: Option<Vec<String>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Report(a) => commands::report(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
