//! Command-line front end: `analyze` runs the estimator grid on a CSV
//! dataset, `simulate` runs the Monte Carlo harness. Errors print to
//! stderr and map to exit codes: 2 for data or configuration problems,
//! 3 for numerical failures (non-convergence, separation, singular
//! systems).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stdmarg::{
    analyze, load_dataset, render_report, run_simulation_with_threads, AnalysisConfig, Error,
    OutputFormat, SimulationConfig,
};

#[derive(Parser)]
#[command(
    name = "stdmarg",
    version,
    about = "Crude, standardized, and augmented marginal treatment-group means for randomized trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate marginal means from a CSV dataset.
    Analyze(AnalyzeArgs),
    /// Run the Monte Carlo simulation harness.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV file with one row per subject.
    #[arg(long)]
    data: PathBuf,
    /// JSON analysis configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output format: text, csv, or json.
    #[arg(long, default_value = "text")]
    out: String,
    /// Report the plain-residual form of the crude and augmented
    /// variances instead of the follow-up-scaled form.
    #[arg(long)]
    printed_variance: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the STDMARG_THREADS environment
    /// variable, then to one thread per core. Results are identical at
    /// any thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output format: json or text.
    #[arg(long, default_value = "json")]
    out: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => run_analyze(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let format: OutputFormat = args.out.parse()?;
    let config_text = std::fs::read_to_string(&args.config)?;
    let mut config: AnalysisConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", args.config.display(), e)))?;
    if args.printed_variance {
        config.printed_variance = true;
    }
    let loaded = load_dataset(&args.data, &config.data)?;
    let report = analyze(&loaded, &config)?;
    print!("{}", render_report(&report, format));
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<(), Error> {
    if args.out != "json" && args.out != "text" {
        return Err(Error::InvalidConfig(format!(
            "unknown output format '{}' (expected json or text)",
            args.out
        )));
    }
    let config_text = std::fs::read_to_string(&args.config)?;
    let config: SimulationConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", args.config.display(), e)))?;
    let threads = match args.threads {
        Some(t) => Some(t),
        None => match std::env::var("STDMARG_THREADS") {
            Ok(raw) => Some(raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("STDMARG_THREADS must be a positive integer, got '{}'", raw))
            })?),
            Err(_) => None,
        },
    };
    if threads == Some(0) {
        return Err(Error::InvalidConfig("thread count must be positive".into()));
    }
    let report = run_simulation_with_threads(&config, threads)?;
    match args.out.as_str() {
        "json" => print!("{}", report.to_json()),
        _ => print!("{}", report.to_text()),
    }
    Ok(())
}
