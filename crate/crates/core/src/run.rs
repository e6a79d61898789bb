//! End-to-end run: build a benchmark, farm its trajectories, write the
//! averaged result.

use std::time::Duration;

use thiserror::Error;

use crate::cluster::{self, ClusterError};
use crate::ode::{Method, OdeConfig};
use crate::output::{write_output, OutputError, OutputFormat};
use crate::problems::ProblemKind;
use crate::trajectory::{OutputTarget, QuantumProblem, RunOptions, TrajectoryError, TrajectoryResult};

/// Seed used when none is given on the command line or in `QTM_SEED`.
pub const DEFAULT_SEED: u64 = 12345;

/// How long a connecting worker keeps retrying before giving up.
pub const CONNECT_PATIENCE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportMode {
    /// `workers = 0` computes inline in the calling thread.
    Local { workers: usize },
    Listen { addr: String, workers: usize },
    Connect { addr: String, rank: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub n_trajectories: u64,
    pub t_from: Option<f64>,
    pub t_to: Option<f64>,
    pub n_steps: Option<usize>,
    pub method: Method,
    pub tol: f64,
    pub seed: u64,
    pub output: OutputTarget,
    pub format: OutputFormat,
    pub transport: TransportMode,
    pub collapse: bool,
    pub verbose: bool,
}

impl RunConfig {
    pub fn new(problem: ProblemKind) -> Self {
        Self {
            problem,
            n_trajectories: 1,
            t_from: None,
            t_to: None,
            n_steps: None,
            method: Method::Adams,
            tol: 1e-7,
            seed: DEFAULT_SEED,
            output: OutputTarget::Stdout,
            format: OutputFormat::Csv,
            transport: TransportMode::Local { workers: 0 },
            collapse: true,
            verbose: false,
        }
    }

    /// Builds the trajectory problem described by this configuration.
    pub fn build_problem(&self) -> Result<QuantumProblem, RunError> {
        if self.n_trajectories < 1 {
            return Err(RunError::Usage("--trajectories must be at least 1".into()));
        }
        let mut b = self.problem.benchmark().map_err(|e| RunError::Numeric(e.to_string()))?;
        if !self.collapse {
            b = b.without_collapse();
        }
        b.t_from = self.t_from.unwrap_or(b.t_from);
        b.t_to = self.t_to.unwrap_or(b.t_to);
        b.n_steps = self.n_steps.unwrap_or(b.n_steps);
        let ode = OdeConfig::new(self.method).with_tolerances(self.tol, 1e-12);
        let mut p = b.problem_with(ode).map_err(|e| RunError::Numeric(e.to_string()))?;
        p.options = RunOptions {
            only_final_trj: true,
            output_target: self.output.clone(),
            verbose: self.verbose,
        };
        p.validate().map_err(|e| match e {
            TrajectoryError::InvalidProblem(m) => RunError::Usage(m),
            TrajectoryError::Ode { source, .. } => RunError::Usage(source.to_string()),
            other => RunError::Numeric(other.to_string()),
        })?;
        Ok(p)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("HALT: numerical failure: {0}")]
    Numeric(String),
    #[error("HALT: transport failure: {0}")]
    Transport(String),
    #[error("HALT: {0}")]
    Output(#[from] OutputError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Numeric(_) => 3,
            RunError::Transport(_) => 4,
            RunError::Output(_) => 1,
        }
    }
}

impl From<ClusterError> for RunError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::Trajectory(_) | ClusterError::WorkerFailed(_) => RunError::Numeric(e.to_string()),
            ClusterError::InvalidPartition(m) => RunError::Usage(m),
            _ => RunError::Transport(e.to_string()),
        }
    }
}

/// Computes the averaged result. Returns `None` in worker mode, where the
/// result is sent to the master instead.
pub fn compute(cfg: &RunConfig) -> Result<Option<TrajectoryResult>, RunError> {
    let problem = cfg.build_problem()?;
    let log = |msg: String| {
        if cfg.verbose {
            eprintln!("{msg}");
        }
    };
    log(format!(
        "problem {} dim {} trajectories {} seed {} method {:?} rtol {:e}",
        cfg.problem,
        problem.dim(),
        cfg.n_trajectories,
        cfg.seed,
        cfg.method,
        cfg.tol
    ));
    match &cfg.transport {
        TransportMode::Local { workers } => {
            let r = cluster::run_local(&problem, cfg.n_trajectories, *workers, cfg.seed)?;
            Ok(Some(r))
        }
        TransportMode::Listen { addr, workers } => {
            if *workers == 0 {
                return Err(RunError::Usage("--listen needs --workers >= 1".into()));
            }
            let listener = std::net::TcpListener::bind(addr).map_err(|e| RunError::Transport(format!("{addr}: {e}")))?;
            log(format!("master listening on {addr} for {workers} workers"));
            let channels = cluster::accept_workers(&listener, *workers)?;
            Ok(Some(cluster::run_master(channels, &problem, cfg.n_trajectories, cfg.seed)?))
        }
        TransportMode::Connect { addr, rank } => {
            let mut ch = cluster::connect_worker(addr.as_str(), *rank, CONNECT_PATIENCE)?;
            log(format!("worker {rank} connected to {addr}"));
            cluster::run_worker(&mut ch, &problem, *rank)?;
            Ok(None)
        }
    }
}

/// Full run including output.
pub fn run(cfg: &RunConfig) -> Result<(), RunError> {
    if let Some(result) = compute(cfg)? {
        write_output(&result, &cfg.output, cfg.format)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trajectories_is_a_usage_error() {
        let mut cfg = RunConfig::new(ProblemKind::Photon);
        cfg.n_trajectories = 0;
        let e = compute(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn bad_interval_is_a_usage_error() {
        let mut cfg = RunConfig::new(ProblemKind::Unitary);
        cfg.t_to = Some(-1.0);
        assert_eq!(compute(&cfg).unwrap_err().exit_code(), 2);
        let mut cfg = RunConfig::new(ProblemKind::Unitary);
        cfg.tol = 0.0;
        assert_eq!(compute(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn overrides_reach_the_problem() {
        let mut cfg = RunConfig::new(ProblemKind::Unitary);
        cfg.t_to = Some(2.0);
        cfg.n_steps = Some(4);
        cfg.collapse = false;
        cfg.method = Method::Bdf;
        let p = cfg.build_problem().unwrap();
        assert_eq!((p.t_to, p.n_steps, p.collapse.len()), (2.0, 4, 0));
        assert_eq!(p.ode.method, Method::Bdf);
        let r = compute(&cfg).unwrap().unwrap();
        assert_eq!(r.times.len(), 5);
    }

    #[test]
    fn unreachable_master_is_a_transport_error() {
        let mut cfg = RunConfig::new(ProblemKind::Unitary);
        cfg.transport = TransportMode::Listen {
            addr: "256.0.0.1:1".into(),
            workers: 1,
        };
        assert_eq!(compute(&cfg).unwrap_err().exit_code(), 4);
    }
}
