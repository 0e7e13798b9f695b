mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    CrisisArgs, DiagnoseArgs, EstimateArgs, FitArgs, PreprocessArgs, SimulateArgs, ValidateArgs,
};

/// Neonatal mortality estimation: synthetic data, preprocessing, model
/// fitting, estimates and validation.
#[derive(Debug, Parser)]
#[command(name = "nmr", version)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Plain-text `key = value` settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its truth record.
    Simulate(SimulateArgs),
    /// Impute missing errors, recombine VR series and simulate stochastic errors.
    Preprocess(PreprocessArgs),
    /// Run the MCMC sampler.
    Fit(FitArgs),
    /// Country-year estimates from a completed fit.
    Estimate(EstimateArgs),
    /// Out-of-sample validation with a recency-based training set.
    Validate(ValidateArgs),
    /// Convergence diagnostics for a completed fit.
    Diagnose(DiagnoseArgs),
    /// NMR adjustments from under-five crisis deaths.
    Crisis(CrisisArgs),
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Convergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Convergence(_) => 3,
        }
    }
}

impl From<nmr_core::Error> for Failure {
    fn from(e: nmr_core::Error) -> Self {
        use nmr_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) => Failure::Usage(e.to_string()),
            E::NonFinite { .. } => Failure::Convergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Convergence(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let file = settings::Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(a, &file),
        Command::Preprocess(a) => commands::preprocess(a, &file),
        Command::Fit(a) => commands::fit(a, &file),
        Command::Estimate(a) => commands::estimate(a, &file),
        Command::Validate(a) => commands::validate(a, &file),
        Command::Diagnose(a) => commands::diagnose(a, &file),
        Command::Crisis(a) => commands::crisis(a, &file),
    }
}
