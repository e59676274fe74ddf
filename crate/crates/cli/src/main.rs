mod manifest;
mod panel_cmds;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stagcomp::Error;

#[derive(Debug, Parser)]
#[command(
    name = "stagcomp",
    version,
    about = "Impute and infer missing entries of staggered-adoption panels"
)]
struct Cli {
    /// Print errors on stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,

    /// Seed for simulations; recorded in every manifest.
    #[arg(long, global = true, env = "STAGCOMP_SEED")]
    seed: Option<u64>,

    /// Worker threads for simulations (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fill the missing cells of a panel.
    Estimate(PanelArgs),
    /// Confidence intervals for every missing cell, one row per cell.
    Infer(InferArgs),
    /// Run a Monte Carlo driver and write its table, summary and manifest.
    Simulate(SimulateArgs),
    /// Timing table of the estimator; same as `simulate --driver runtime`.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct PanelArgs {
    /// Wide CSV, one row per unit; empty or NaN cells are missing.
    input: PathBuf,
    #[arg(long)]
    rank: usize,
    /// One adoption period per unit (1-based; 0 or beyond the last period means never treated).
    #[arg(long)]
    adoption_times: Option<PathBuf>,
    /// Input files have no header row.
    #[arg(long)]
    no_header: bool,
    /// Output file (default: stdout, without sidecar files).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct InferArgs {
    #[command(flatten)]
    #[serde(flatten)]
    panel: PanelArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Wide CSV of treated outcomes, same shape as the panel.
    #[arg(long)]
    treated_outcomes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Driver {
    Incoherence,
    Rank,
    Qq,
    Coverage,
    Runtime,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    /// Ensemble configuration (JSON); not needed for the runtime driver.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    driver: Driver,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Incoherence levels for the incoherence driver.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-4, 1e-2, 1.0, 10.0])]
    levels: Vec<f64>,
    /// Ranks for the rank driver.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    ranks: Vec<usize>,
    /// Panel sizes for the runtime driver.
    #[arg(long, value_delimiter = ',', default_values_t = vec![512, 1024, 2048, 4096])]
    sizes: Vec<usize>,
    /// Timed repeats per size for the runtime driver.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Target entry as `unit,period` (1-based; default: last unit, last period).
    #[arg(long)]
    entry: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![512, 1024, 2048, 4096])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
}

/// 0 ok, 1 input or I/O, 2 missingness pattern, 3 numerical.
fn exit_code(e: &Error) -> u8 {
    if e.is_pattern_error() {
        2
    } else if e.is_numerical_error() {
        3
    } else {
        1
    }
}

fn report(e: &Error, json: bool) {
    let code = exit_code(e);
    if json {
        let body = serde_json::json!({
            "kind": e.kind(),
            "message": e.to_string(),
            "exit_code": code,
            "block": e.block().map(|(i0, j0)| [i0, j0]),
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {e}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let ctx = manifest::Context::new(cli.seed, cli.workers);
    match cli.command {
        Command::Estimate(args) => panel_cmds::estimate(&ctx, &args),
        Command::Infer(args) => panel_cmds::infer(&ctx, &args),
        Command::Simulate(args) => simulate::simulate(&ctx, &args),
        Command::Bench(args) => simulate::bench(&ctx, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let json = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, json);
            ExitCode::from(exit_code(&e))
        }
    }
}
