//! `squeezelab` — deterministic runner for the levitated-particle squeezing
//! simulation: variance sweeps, detector calibrations, the technical noise
//! budget, and a Monte Carlo self-check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use squeezelab_cli::{runner, CliError, Config};

#[derive(Parser)]
#[command(
    name = "squeezelab",
    version,
    about = "Digital twin of a levitated-nanoparticle squeezing experiment",
    after_help = "Exit codes: 0 success, 2 fit failure, 3 oracle deviation, 4 config error.\n\
                  The SQUEEZELAB_SEED environment variable overrides master_seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the key=value run configuration file.
    config: PathBuf,
    /// Override a configuration value (repeatable), e.g. --set n_trials=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Velocity variance vs hold time at one squeezing strength (fig2.csv).
    TimeSweep(RunArgs),
    /// Envelope variances vs squeezing strength (fig3.csv, figS-varVp.csv).
    RSweep(RunArgs),
    /// Detector calibration from time-of-flight thermometry (figS-tof.csv).
    CalibTof(RunArgs),
    /// Detector calibration from lattice shifts, with a TOF cross-check
    /// (fig4c.csv, fig4d.csv).
    CalibLattice(RunArgs),
    /// Compile the technical noise budget (noise_budget.csv).
    NoiseBudget(RunArgs),
    /// Compare Monte Carlo variances against the closed form (oracle.csv);
    /// exits 3 when they disagree beyond the threshold.
    OracleCheck(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TimeSweep(_) => "time-sweep",
            Command::RSweep(_) => "r-sweep",
            Command::CalibTof(_) => "calib-tof",
            Command::CalibLattice(_) => "calib-lattice",
            Command::NoiseBudget(_) => "noise-budget",
            Command::OracleCheck(_) => "oracle-check",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::TimeSweep(a)
            | Command::RSweep(a)
            | Command::CalibTof(a)
            | Command::CalibLattice(a)
            | Command::NoiseBudget(a)
            | Command::OracleCheck(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Config(format!("cannot read config `{}`: {e}", args.config.display()))
    })?;
    let env_seed = std::env::var("SQUEEZELAB_SEED").ok();
    let cfg = Config::from_sources(&text, &args.set, env_seed.as_deref())?;
    let report = runner::run_named(cli.command.name(), &cfg)?;

    println!(
        "{}: seed {} fingerprint {}",
        report.experiment, report.master_seed, report.config_fingerprint
    );
    for name in &report.outputs {
        println!("  wrote {}", PathBuf::from(cfg.output_dir()?).join(name).display());
    }
    println!(
        "  wrote {}",
        PathBuf::from(cfg.output_dir()?).join("report.json").display()
    );
    if let Ok(pretty) = serde_json::to_string_pretty(&report.results) {
        println!("{pretty}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
