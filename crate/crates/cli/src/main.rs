//! `qtm`: run one of the benchmark problems and print or save the averaged
//! expectation values.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use qtm_core::ode::Method;
use qtm_core::output::OutputFormat;
use qtm_core::problems::ProblemKind;
use qtm_core::run::{run, RunConfig, TransportMode, DEFAULT_SEED};
use qtm_core::trajectory::OutputTarget;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProblemArg {
    Unitary,
    Trilinear,
    Jcm,
    Photon,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Adams,
    Bdf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Text,
}

/// Monte Carlo wave-function simulator for open quantum systems.
///
/// Exit status: 0 success, 2 usage error, 3 numerical failure, 4 transport
/// failure, 1 output I/O failure.
#[derive(Debug, Parser)]
#[command(name = "qtm", version)]
struct Cli {
    /// Benchmark problem to run.
    #[arg(long, value_enum)]
    problem: ProblemArg,

    /// Number of trajectories to average.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    trajectories: u64,

    /// Start of the output grid (problem default if omitted).
    #[arg(long, allow_hyphen_values = true)]
    t_from: Option<f64>,

    /// End of the output grid (problem default if omitted).
    #[arg(long, allow_hyphen_values = true)]
    t_to: Option<f64>,

    /// Number of grid intervals; the output has steps + 1 rows.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: Option<u64>,

    /// Integration method.
    #[arg(long, value_enum, default_value_t = MethodArg::Adams)]
    method: MethodArg,

    /// Relative tolerance of the integrator (absolute tolerance is 1e-12).
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,

    /// Master seed; worker k draws from a stream derived from (seed, k).
    #[arg(long, env = "QTM_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Output file; standard output if omitted. Relative paths are resolved
    /// against QTM_OUTPUT_DIR when it is set.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Output format.
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,

    /// In-process workers; 0 computes inline.
    #[arg(long, default_value_t = 0, conflicts_with_all = ["listen", "connect"])]
    local_workers: usize,

    /// Run as master over TCP, listening on HOST:PORT.
    #[arg(long, value_name = "HOST:PORT", requires = "workers", conflicts_with = "connect")]
    listen: Option<String>,

    /// Number of TCP workers the master waits for.
    #[arg(long, requires = "listen", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,

    /// Run as a TCP worker connecting to the master at HOST:PORT.
    #[arg(long, value_name = "HOST:PORT", requires = "rank")]
    connect: Option<String>,

    /// Worker rank (0-based) when connecting.
    #[arg(long, requires = "connect")]
    rank: Option<u32>,

    /// Drop the collapse operators (closed-system evolution).
    #[arg(long)]
    no_collapse: bool,

    /// Progress and configuration messages on standard error.
    #[arg(long)]
    verbose: bool,
}

impl Cli {
    fn into_config(self) -> RunConfig {
        let output = match self.output {
            None => OutputTarget::Stdout,
            Some(p) if p.is_relative() => match std::env::var_os("QTM_OUTPUT_DIR") {
                Some(dir) => OutputTarget::File(PathBuf::from(dir).join(p)),
                None => OutputTarget::File(p),
            },
            Some(p) => OutputTarget::File(p),
        };
        let transport = match (self.listen, self.connect) {
            (Some(addr), _) => TransportMode::Listen {
                addr,
                workers: self.workers.unwrap_or(1) as usize,
            },
            (None, Some(addr)) => TransportMode::Connect {
                addr,
                rank: self.rank.unwrap_or(0),
            },
            (None, None) => TransportMode::Local {
                workers: self.local_workers,
            },
        };
        RunConfig {
            problem: match self.problem {
                ProblemArg::Unitary => ProblemKind::Unitary,
                ProblemArg::Trilinear => ProblemKind::Trilinear,
                ProblemArg::Jcm => ProblemKind::Jcm,
                ProblemArg::Photon => ProblemKind::Photon,
            },
            n_trajectories: self.trajectories,
            t_from: self.t_from,
            t_to: self.t_to,
            n_steps: self.steps.map(|s| s as usize),
            method: match self.method {
                MethodArg::Adams => Method::Adams,
                MethodArg::Bdf => Method::Bdf,
            },
            tol: self.tol,
            seed: self.seed,
            output,
            format: match self.format {
                FormatArg::Csv => OutputFormat::Csv,
                FormatArg::Text => OutputFormat::Text,
            },
            transport,
            collapse: !self.no_collapse,
            verbose: self.verbose,
        }
    }
}

fn main() -> ExitCode {
    let cfg = Cli::parse().into_config();
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qtm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
