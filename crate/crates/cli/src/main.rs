mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use effgram::gram::PropagatorMethod;

/// Generalization-gap dynamics of full-batch gradient descent through the
/// effective Gram matrix.
#[derive(Debug, Parser)]
#[command(name = "effgram", version)]
struct Cli {
    /// Worker threads for trajectory training and kernel assembly.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or load the samples and write train.json / test.json.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full run and every leave-out run, writing the trajectory dump.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the initialization seed of the training section.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Factors, propagator and effective Gram matrix from a trajectory dump.
    Analyze {
        /// Config to use instead of the run directory's config.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<PropagatorMethod>,
        /// Start the analysis at this recorded step.
        #[arg(long)]
        from_step: Option<usize>,
    },
    /// Eigen-statistics of K against a residual, written as spectrum.csv.
    Spectrum {
        /// Run directory holding K.bin, K.json and r0.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Directory with K.bin and K.json, if not the run directory.
        #[arg(long)]
        gram: Option<PathBuf>,
        /// JSON array with the residual, if not the run directory's r0.json.
        #[arg(long)]
        r0: Option<PathBuf>,
    },
    /// Two-point task: closed forms against the pipeline.
    Oracle {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        y1: f64,
        #[arg(long, default_value_t = 1.0)]
        y2: f64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps0: f64,
        #[arg(long, value_parser = parse_method)]
        method: Option<PropagatorMethod>,
        /// Directory for oracle.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One summary row per analysed run directory.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Destination CSV; defaults to report.csv in the single run
        /// directory, or in the working directory for several runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<PropagatorMethod, String> {
    s.parse().map_err(|e: effgram::Error| e.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] effgram::Error),
}

impl CliError {
    pub fn config(e: effgram::Error) -> Self {
        CliError::Config(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        use effgram::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Input(_) | E::Shape(_) | E::Format { .. } => 2,
                E::Divergence { .. } => 3,
                E::Integrity(_) | E::Json(_) => 4,
                _ => 1,
            },
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Dataset { config, out } => commands::dataset(&config, out),
        Command::Train { config, out, seed } => commands::train(&config, out, seed),
        Command::Analyze { config, out, method, from_step } => commands::analyze(config, out, method, from_step),
        Command::Spectrum { out, gram, r0 } => commands::spectrum(&out, gram, r0),
        Command::Oracle { n, y1, y2, horizon, eta, stride, eps0, method, out } => {
            commands::oracle(n, y1, y2, horizon, eta, stride, eps0, method, out)
        }
        Command::Report { runs, out } => commands::report(&runs, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
