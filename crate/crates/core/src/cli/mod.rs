//! Command-line front end: configuration, experiment drivers and property suites.

/// `println!` that ignores a closed stdout instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub mod commands;
pub mod config;
pub mod suites;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::KslbError;
pub use commands::Mode;
pub use config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Ok = 0,
    BlowUp = 2,
    NumericalFailure = 3,
    Invariant = 4,
    Usage = 64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Calibrate,
    Assert,
}

#[derive(Parser, Debug)]
#[command(name = "kslb", version, about = "Keller-Segel logistic simulations and estimate monitors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent runs for sweep and mconv.
    #[arg(long, global = true, env = "KSLB_WORKERS")]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "calibrate")]
    mode: ModeArg,
    /// Seed for the random_smooth preset (overrides init.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single run with traces, residuals, checkpoint and summary.
    Run,
    /// One run per value of sweep.param.
    Sweep,
    /// Truncation-radius convergence study over mconv.m_values.
    Mconv,
    /// Property suite: fields, norms, dyadic, solver, monitors or all.
    Check { suite: String },
    /// Long-format tables from the CSVs in the output directory.
    Report,
}

fn load_config(cli: &Cli) -> crate::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.init.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> crate::Result<ExitCode> {
    let mode = match cli.mode {
        ModeArg::Calibrate => Mode::Calibrate,
        ModeArg::Assert => Mode::Assert,
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Command::Check { suite } = &cli.command {
        return suites::cmd_check(suite);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run => commands::cmd_run(&cfg, mode),
        Command::Sweep => commands::cmd_sweep(&cfg, mode, workers),
        Command::Mconv => commands::cmd_mconv(&cfg, mode, workers),
        Command::Report => commands::cmd_report(&cfg.out_dir),
        Command::Check { .. } => unreachable!("handled above"),
    }
}

fn error_code(e: &KslbError) -> ExitCode {
    match e {
        KslbError::Config(_)
        | KslbError::InvalidArgument(_)
        | KslbError::InvalidGrid(_)
        | KslbError::Precondition(_) => ExitCode::Usage,
        _ => ExitCode::NumericalFailure,
    }
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage as i32 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e) as i32
        }
    }
}
