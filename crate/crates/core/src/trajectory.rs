//! Single-trajectory quantum-jump engine, trajectory averaging and the dense
//! master-equation oracle.
//!
//! Between jumps a trajectory integrates dψ/dt = G·ψ, whose squared norm decays
//! monotonically. A uniform draw `r` fixes the norm level at which the next jump
//! happens; the crossing time is found by bisection on the solver's dense
//! output, a collapse channel is picked with a second, independent draw, and the
//! solver restarts cold from the renormalised post-jump state.
//!
//! Draw order per trajectory: `r₁`, then for every jump `u` (channel choice)
//! followed by the next `r`.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{norm_sq_slice, Complex128, CsrMatrix, DenseMatrix, DenseVector, LinalgError, ZERO};
use crate::ode::{FnRhs, OdeConfig, OdeError, OdeRhs, OdeSolver};
use crate::operators::{LindbladGenerator, OperatorSet};
use crate::rng::Lfsr113;

const BISECTION_ITERS: usize = 60;
const BISECTION_RTOL: f64 = 1e-9;
/// Interpolation error can leave the lower bracket end marginally below `r`.
const BRACKET_SLACK: f64 = 1e-6;
const ORACLE_MAX_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("{}ODE failure (ISTATE {}): {source}", trajectory_prefix(.trajectory), .source.istate())]
    Ode {
        trajectory: Option<u64>,
        #[source]
        source: OdeError,
    },
    #[error("no collapse channel has support on the current state")]
    NoCollapseSupport,
    #[error("jump bracket violated on [{t_lo}, {t_hi}]: norm² {n_lo:e} .. {n_hi:e} vs r = {r:e}")]
    BracketViolated {
        t_lo: f64,
        t_hi: f64,
        n_lo: f64,
        n_hi: f64,
        r: f64,
    },
    #[error("expectation of a zero vector")]
    ZeroVector,
    #[error("cannot average results: {0}")]
    GridMismatch(String),
    #[error("master-equation oracle limited to dim {ORACLE_MAX_DIM}, got {0}")]
    OracleTooLarge(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn trajectory_prefix(t: &Option<u64>) -> String {
    t.map(|i| format!("trajectory {i}: ")).unwrap_or_default()
}

impl TrajectoryError {
    /// Attaches the index of the failing trajectory to ODE failures.
    pub fn with_trajectory(self, index: u64) -> Self {
        match self {
            TrajectoryError::Ode { source, .. } => TrajectoryError::Ode {
                trajectory: Some(index),
                source,
            },
            other => other,
        }
    }
}

impl From<OdeError> for TrajectoryError {
    fn from(source: OdeError) -> Self {
        TrajectoryError::Ode {
            trajectory: None,
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

pub type RhsFn = dyn Fn(f64, &[Complex128], &mut [Complex128]) + Send + Sync;

/// No-jump dynamics dψ/dt = f(t, ψ).
#[derive(Clone)]
pub enum Generator {
    /// f = G·ψ with a fixed effective generator.
    Constant(CsrMatrix),
    /// Caller-supplied right-hand side for time-dependent Hamiltonians. The
    /// label identifies the function in problem digests.
    TimeDependent {
        label: String,
        dim: usize,
        rhs: Arc<RhsFn>,
    },
}

impl Generator {
    pub fn dim(&self) -> usize {
        match self {
            Generator::Constant(g) => g.dim(),
            Generator::TimeDependent { dim, .. } => *dim,
        }
    }
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Constant(g) => f.debug_tuple("Constant").field(g).finish(),
            Generator::TimeDependent { label, dim, .. } => f
                .debug_struct("TimeDependent")
                .field("label", label)
                .field("dim", dim)
                .finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OutputTarget {
    #[default]
    Stdout,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub only_final_trj: bool,
    pub output_target: OutputTarget,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct QuantumProblem {
    pub generator: Generator,
    pub collapse: Vec<CsrMatrix>,
    pub expect: Vec<CsrMatrix>,
    pub psi0: DenseVector,
    pub t_from: f64,
    pub t_to: f64,
    pub n_steps: usize,
    pub ode: OdeConfig,
    pub options: RunOptions,
}

impl QuantumProblem {
    pub fn dim(&self) -> usize {
        self.psi0.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrajectoryError::InvalidProblem(m));
        let n = self.psi0.dim();
        if self.generator.dim() != n {
            return bad(format!("generator dim {} vs state dim {n}", self.generator.dim()));
        }
        if let Some(m) = self.collapse.iter().chain(&self.expect).find(|m| m.dim() != n) {
            return bad(format!("operator dim {} vs state dim {n}", m.dim()));
        }
        if let Some(i) = self.psi0.first_non_finite() {
            return bad(format!("psi0 has a non-finite entry at {i}"));
        }
        let nrm = self.psi0.norm_sq();
        if (nrm - 1.0).abs() > 1e-12 {
            return bad(format!("psi0 must be normalised, norm² = {nrm}"));
        }
        if !(self.t_from.is_finite() && self.t_to.is_finite() && self.t_to > self.t_from) {
            return bad(format!("need t_to > t_from, got [{}, {}]", self.t_from, self.t_to));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be positive".into());
        }
        self.ode.validate()?;
        Ok(())
    }

    /// Output grid: `n_steps + 1` equally spaced points, endpoints exact.
    pub fn times(&self) -> Vec<f64> {
        uniform_grid(self.t_from, self.t_to, self.n_steps)
    }
}

pub fn uniform_grid(t_from: f64, t_to: f64, n_steps: usize) -> Vec<f64> {
    let dt = (t_to - t_from) / n_steps as f64;
    let mut t: Vec<f64> = (0..=n_steps).map(|k| t_from + k as f64 * dt).collect();
    t[n_steps] = t_to;
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub t: f64,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub times: Vec<f64>,
    /// `values[k][i]`: expectation of operator k at `times[i]`.
    pub values: Vec<Vec<f64>>,
    pub n_trajectories: u64,
    pub jumps: Option<Vec<Jump>>,
}

impl TrajectoryResult {
    /// Zero-count result on the given grid.
    pub fn empty(times: Vec<f64>, n_expect: usize) -> Self {
        let n = times.len();
        Self {
            times,
            values: vec![vec![0.0; n]; n_expect],
            n_trajectories: 0,
            jumps: None,
        }
    }
}

struct ProblemRhs<'a> {
    gen: &'a Generator,
    dense: std::cell::OnceCell<DenseMatrix>,
}

impl<'a> ProblemRhs<'a> {
    fn new(gen: &'a Generator) -> Self {
        Self {
            gen,
            dense: std::cell::OnceCell::new(),
        }
    }
}

impl OdeRhs for ProblemRhs<'_> {
    fn eval(&self, t: f64, y: &[Complex128], ydot: &mut [Complex128]) {
        match self.gen {
            Generator::Constant(g) => g.spmv_into(y, ydot),
            Generator::TimeDependent { rhs, .. } => rhs(t, y, ydot),
        }
    }

    fn jacobian(&self, _t: f64, _y: &[Complex128]) -> Option<DenseMatrix> {
        match self.gen {
            Generator::Constant(g) => Some(self.dense.get_or_init(|| g.to_dense()).clone()),
            Generator::TimeDependent { .. } => None,
        }
    }

    fn constant_jacobian(&self) -> bool {
        matches!(self.gen, Generator::Constant(_))
    }
}

/// Source of uniform [0, 1) draws for the jump engine.
pub trait UniformSource {
    fn next_u01(&mut self) -> f64;
}

impl UniformSource for Lfsr113 {
    fn next_u01(&mut self) -> f64 {
        Lfsr113::next_u01(self)
    }
}

/// Replays a fixed list of draws, then panics; for scripted tests.
#[derive(Debug, Clone)]
pub struct ScriptedDraws {
    draws: Vec<f64>,
    pos: usize,
}

impl ScriptedDraws {
    pub fn new(draws: Vec<f64>) -> Self {
        Self { draws, pos: 0 }
    }
}

impl UniformSource for ScriptedDraws {
    fn next_u01(&mut self) -> f64 {
        let u = self.draws[self.pos];
        self.pos += 1;
        u
    }
}

/// Runs one trajectory on `rng`, advancing it.
pub fn run_single_trajectory(p: &QuantumProblem, rng: &mut Lfsr113) -> Result<TrajectoryResult> {
    run_trajectory_with(p, rng)
}

pub fn run_trajectory_with<U: UniformSource + ?Sized>(p: &QuantumProblem, draws: &mut U) -> Result<TrajectoryResult> {
    Ok(integrate(p, draws)?.result)
}

#[cfg_attr(not(test), allow(dead_code))]
struct Trace {
    result: TrajectoryResult,
    /// Raw norm² of the state at every grid point.
    grid_norms: Vec<f64>,
    /// Norm² of each post-jump state.
    post_jump_norms: Vec<f64>,
}

struct Recorder<'a> {
    p: &'a QuantumProblem,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    grid_norms: Vec<f64>,
    next: usize,
}

impl Recorder<'_> {
    fn record(&mut self, psi: &[Complex128]) -> Result<()> {
        let i = self.next;
        let nrm = norm_sq_slice(psi);
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(TrajectoryError::ZeroVector);
        }
        for (k, e) in self.p.expect.iter().enumerate() {
            self.values[k][i] = expectation_unchecked(psi, nrm, e);
        }
        self.grid_norms[i] = nrm;
        self.next += 1;
        Ok(())
    }

    fn done(&self) -> bool {
        self.next == self.times.len()
    }

    fn pending_until(&self, t: f64) -> bool {
        !self.done() && self.times[self.next] <= t
    }

    fn record_from_solver<R: OdeRhs>(&mut self, solver: &OdeSolver<R>, t_until: f64) -> Result<()> {
        while self.pending_until(t_until) {
            let psi = solver.interpolate_at(self.times[self.next])?;
            self.record(psi.as_slice())?;
        }
        Ok(())
    }
}

fn integrate<U: UniformSource + ?Sized>(p: &QuantumProblem, draws: &mut U) -> Result<Trace> {
    p.validate()?;
    let times = p.times();
    let npts = times.len();
    let mut rec = Recorder {
        p,
        values: vec![vec![0.0; npts]; p.expect.len()],
        grid_norms: vec![0.0; npts],
        times,
        next: 0,
    };
    rec.record(p.psi0.as_slice())?;

    let rhs = ProblemRhs::new(&p.generator);
    let mut jumps = Vec::new();
    let mut post_jump_norms = Vec::new();
    let mut t = p.t_from;
    let mut psi = p.psi0.clone();
    let mut r = draws.next_u01();
    let tiny = 1e-12 * p.t_to.abs().max(1.0);

    'segments: while !rec.done() {
        if p.t_to - t <= tiny {
            // A jump this close to the end leaves no room for a solver step.
            while !rec.done() {
                rec.record(psi.as_slice())?;
            }
            break;
        }
        let mut solver = OdeSolver::new(p.ode.clone(), &rhs, t, psi.as_slice())?;
        solver.set_stop_time(Some(p.t_to));
        let mut since_record = 0usize;
        loop {
            solver.step()?;
            since_record += 1;
            let tn = solver.t();
            if !p.collapse.is_empty() && solver.norm_sq() < r {
                let t_jump = locate_jump_time(&solver, r, tn - solver.last_step(), tn)?;
                rec.record_from_solver(&solver, t_jump)?;
                let before = solver.interpolate_at(t_jump)?;
                let (after, channel) = apply_collapse(&before, &p.collapse, draws.next_u01())?;
                jumps.push(Jump { t: t_jump, channel });
                post_jump_norms.push(after.norm_sq());
                r = draws.next_u01();
                t = t_jump;
                psi = after;
                continue 'segments;
            }
            let before = rec.next;
            rec.record_from_solver(&solver, tn)?;
            if rec.next != before {
                since_record = 0;
            }
            if rec.done() {
                break 'segments;
            }
            if since_record >= p.ode.max_steps {
                return Err(OdeError::TooManySteps {
                    t: tn,
                    target: rec.times[rec.next],
                    steps: since_record,
                }
                .into());
            }
        }
    }

    Ok(Trace {
        result: TrajectoryResult {
            times: rec.times,
            values: rec.values,
            n_trajectories: 1,
            jumps: Some(jumps),
        },
        grid_norms: rec.grid_norms,
        post_jump_norms,
    })
}

/// Finds t* in `[t_lo, t_hi]` with `|‖ψ(t*)‖² − r| ≤ 1e−9·r` by bisection on the
/// solver's interpolant. The bracket must satisfy ‖ψ(t_lo)‖² ≥ r ≥ ‖ψ(t_hi)‖².
pub fn locate_jump_time<R: OdeRhs>(solver: &OdeSolver<R>, r: f64, t_lo: f64, t_hi: f64) -> Result<f64> {
    let excess = |t: f64| -> Result<f64> { Ok(solver.interpolate_at(t)?.norm_sq() - r) };
    let tol = BISECTION_RTOL * r;
    let (f_lo, f_hi) = (excess(t_lo)?, excess(t_hi)?);
    if f_lo.abs() <= tol {
        return Ok(t_lo);
    }
    if f_hi.abs() <= tol {
        return Ok(t_hi);
    }
    if f_lo < 0.0 && f_lo > -BRACKET_SLACK * r {
        return Ok(t_lo);
    }
    if f_lo < 0.0 || f_hi > 0.0 {
        return Err(TrajectoryError::BracketViolated {
            t_lo,
            t_hi,
            n_lo: f_lo + r,
            n_hi: f_hi + r,
            r,
        });
    }
    let (mut lo, mut hi) = (t_lo, t_hi);
    let mut best = (f_hi.abs(), t_hi);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let f = excess(mid)?;
        if f.abs() <= tol {
            return Ok(mid);
        }
        if f.abs() < best.0 {
            best = (f.abs(), mid);
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Applies the channel n whose cumulative probability first reaches `u`, with
/// Pₙ ∝ ‖Cₙψ‖², and returns the normalised Cₙψ.
pub fn apply_collapse(psi: &DenseVector, collapse: &[CsrMatrix], u: f64) -> Result<(DenseVector, usize)> {
    let images = collapse
        .iter()
        .map(|c| c.spmv(psi))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let weights: Vec<f64> = images.iter().map(DenseVector::norm_sq).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(TrajectoryError::NoCollapseSupport);
    }
    let last_supported = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
    let mut cum = 0.0;
    let mut chosen = last_supported;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if w > 0.0 && cum / total >= u {
            chosen = i;
            break;
        }
    }
    let image = &images[chosen];
    Ok((image.scale(Complex128::new(1.0 / weights[chosen].sqrt(), 0.0)), chosen))
}

/// ⟨ψ|E|ψ⟩ / ⟨ψ|ψ⟩ (real part).
pub fn record_expectation(psi: &DenseVector, e: &CsrMatrix) -> Result<f64> {
    let nrm = psi.norm_sq();
    if !(nrm > 0.0) {
        return Err(TrajectoryError::ZeroVector);
    }
    if e.dim() != psi.dim() {
        return Err(LinalgError::DimensionMismatch {
            op: "expectation",
            left: e.dim(),
            right: psi.dim(),
        }
        .into());
    }
    Ok(expectation_unchecked(psi.as_slice(), nrm, e))
}

fn expectation_unchecked(psi: &[Complex128], nrm: f64, e: &CsrMatrix) -> f64 {
    let q = e.quadratic_form(psi) / nrm;
    debug_assert!(
        !is_hermitian(e) || q.im.abs() <= 1e-10 * q.norm().max(1.0),
        "imaginary residue {} for a Hermitian operator",
        q.im
    );
    q.re
}

/// Structural comparison with the adjoint; an operator whose adjoint has a
/// different sparsity pattern is reported as non-Hermitian.
fn is_hermitian(e: &CsrMatrix) -> bool {
    let d = e.dagger();
    d.row_ptr() == e.row_ptr()
        && d.col_ind() == e.col_ind()
        && d.values().iter().zip(e.values()).all(|(a, b)| (a - b).norm() <= 1e-14)
}

/// Entrywise mean weighted by trajectory counts. Zero-count inputs are
/// ignored; if every input is empty the result is an empty result on the
/// common grid.
pub fn average_trajectories(results: &[TrajectoryResult]) -> Result<TrajectoryResult> {
    let first = results
        .first()
        .ok_or_else(|| TrajectoryError::GridMismatch("no results to average".into()))?;
    for (i, r) in results.iter().enumerate() {
        if r.times != first.times {
            return Err(TrajectoryError::GridMismatch(format!("result {i} has a different time grid")));
        }
        if r.values.len() != first.values.len() || r.values.iter().any(|v| v.len() != r.times.len()) {
            return Err(TrajectoryError::GridMismatch(format!("result {i} has a different shape")));
        }
    }
    let nonempty: Vec<&TrajectoryResult> = results.iter().filter(|r| r.n_trajectories > 0).collect();
    if nonempty.len() == 1 {
        return Ok(nonempty[0].clone());
    }
    let mut out = TrajectoryResult::empty(first.times.clone(), first.values.len());
    for r in nonempty {
        out.n_trajectories += r.n_trajectories;
        let w = r.n_trajectories as f64 / out.n_trajectories as f64;
        for (acc, v) in out.values.iter_mut().zip(&r.values) {
            for (m, x) in acc.iter_mut().zip(v) {
                *m += w * (x - *m);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterEquationSolution {
    pub times: Vec<f64>,
    /// `values[k][i]` = tr(Eₖ ρ(tᵢ)).
    pub values: Vec<Vec<f64>>,
    pub traces: Vec<f64>,
}

/// Integrates the Lindblad equation for the row-major flattened ρ with the
/// Adams solver at rtol 1e−10.
pub fn solve_master_equation(ops: &OperatorSet, rho0: &DenseMatrix, grid: &[f64]) -> Result<MasterEquationSolution> {
    let cfg = OdeConfig::adams().with_tolerances(1e-10, 1e-13);
    solve_master_equation_with(ops, rho0, grid, cfg)
}

pub fn solve_master_equation_with(
    ops: &OperatorSet,
    rho0: &DenseMatrix,
    grid: &[f64],
    cfg: OdeConfig,
) -> Result<MasterEquationSolution> {
    let n = ops.dim();
    if n > ORACLE_MAX_DIM {
        return Err(TrajectoryError::OracleTooLarge(n));
    }
    if rho0.dim() != n {
        return Err(LinalgError::DimensionMismatch {
            op: "master equation",
            left: n,
            right: rho0.dim(),
        }
        .into());
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(TrajectoryError::InvalidProblem("grid must be strictly increasing".into()));
    }
    let lind = LindbladGenerator::new(ops)?;
    let expect = ops
        .expect
        .iter()
        .map(|e| e.to_csr(0.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let scratch = std::cell::RefCell::new(Vec::new());
    let rhs = FnRhs(|_t: f64, y: &[Complex128], d: &mut [Complex128]| {
        lind.apply(y, d, &mut scratch.borrow_mut());
    });
    let mut solver = OdeSolver::new(cfg, &rhs, grid[0], rho0.as_slice())?;
    let mut values = vec![Vec::with_capacity(grid.len()); expect.len()];
    let mut traces = Vec::with_capacity(grid.len());
    for &t in grid {
        let rho = if t == grid[0] { DenseVector::new(rho0.as_slice().to_vec())? } else { solver.advance_to(t)? };
        let rho = rho.as_slice();
        traces.push((0..n).map(|i| rho[i * n + i].re).sum());
        for (k, e) in expect.iter().enumerate() {
            values[k].push(trace_product(e, rho, n).re);
        }
    }
    Ok(MasterEquationSolution {
        times: grid.to_vec(),
        values,
        traces,
    })
}

/// tr(E·ρ) = Σᵢⱼ Eᵢⱼ ρⱼᵢ.
fn trace_product(e: &CsrMatrix, rho: &[Complex128], n: usize) -> Complex128 {
    let mut acc = ZERO;
    for i in 0..n {
        for (j, v) in e.row(i) {
            acc += v * rho[j * n + i];
        }
    }
    acc
}
