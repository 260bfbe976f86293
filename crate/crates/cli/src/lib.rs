//! Command-line pipeline: `gen-data → train → calibrate → bench → report`.
//!
//! Every command writes its outputs atomically into `--out`, stamps them with the format
//! version and the config hash, and on failure prints one JSON line to stderr.

pub mod artifact;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsout;
pub mod policy;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{BenchArgs, CalibrateArgs, Common, TrainArgs};
use crate::error::CliError;

pub const THREADS_ENV: &str = "EXITFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "exitflow",
    version,
    about = "Train, calibrate and benchmark early-exit action policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; also the default location of inputs from earlier stages.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train, calibration and eval episode sets.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the model (or materialise the analytic oracle) and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint up to `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Collect discrepancies on the calibration set and fit exit thresholds.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate full-depth and calibrated early-exit inference on the eval set.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Summarise a bench run into a per-configuration cost and success table.
    Report {
        /// Directory holding `bench.json`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            out: a.out,
            seed: a.seed,
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(raw) = std::env::var_os(THREADS_ENV) {
        let n: usize = raw
            .to_str()
            .and_then(|s| s.trim().parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "{THREADS_ENV} must be a positive integer, got {raw:?}"
                ))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::new(error::ErrorClass::Runtime, "threads", e.to_string()))
}

fn execute(command: Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::GenData { common } => commands::gen_data(&common.into()),
        Command::Train {
            common,
            data,
            resume,
        } => commands::train(&common.into(), &TrainArgs { data, resume }),
        Command::Calibrate {
            common,
            checkpoint,
            data,
        } => commands::calibrate(&common.into(), &CalibrateArgs { checkpoint, data }),
        Command::Bench {
            common,
            checkpoint,
            calibration,
            data,
        } => commands::bench(
            &common.into(),
            &BenchArgs {
                checkpoint,
                calibration,
                data,
            },
        ),
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            commands::report(&input, &out)
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string().trim().replace('\n', " "));
            eprintln!("{}", err.to_line());
            return err.exit_code();
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| execute(cli.command)));
    match result {
        Ok(paths) => {
            let written: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            println!("{}", serde_json::json!({ "written": written }));
            0
        }
        Err(err) => {
            eprintln!("{}", err.to_line());
            err.exit_code()
        }
    }
}
