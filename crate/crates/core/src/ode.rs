//! Variable-order, variable-step implicit linear multistep integrator for
//! complex systems y' = f(t, y).
//!
//! Two method families share one driver:
//!
//! * Adams-Moulton, orders 1–12, for non-stiff problems (functional iteration
//!   by default);
//! * BDF, orders 1–6, for stiff problems (Newton iteration with the matrix
//!   `I − h·l₀·J`).
//!
//! History is kept as a Nordsieck array `z[j] = hʲ·y⁽ʲ⁾/j!`, with the
//! fixed-leading-coefficient formulation of the LSODE/VODE family: a step
//! change rescales the array, an order change adds or drops a column.
//! Local error is measured in the weighted RMS norm with weights
//! `1/(atol + rtol·|yᵢ|)` and must stay at or below one.

use thiserror::Error;

use crate::linalg::{norm_sq_slice, Complex128, DenseMatrix, DenseVector, LuFactors, ZERO};

const ADAMS_MAX_ORDER: usize = 12;
const BDF_MAX_ORDER: usize = 6;
const MAX_CORRECTOR_ITERS: usize = 3;
const MAX_CONV_FAILURES: usize = 10;
const MAX_STEP_RATIO: f64 = 10.0;
const MIN_STEP_RATIO: f64 = 0.1;
const REFACTOR_RATIO: f64 = 0.3;
const STEPS_BETWEEN_JACOBIANS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Adams,
    Bdf,
}

impl Method {
    pub fn max_order(self) -> usize {
        match self {
            Method::Adams => ADAMS_MAX_ORDER,
            Method::Bdf => BDF_MAX_ORDER,
        }
    }

    fn default_order(self) -> usize {
        match self {
            Method::Adams => ADAMS_MAX_ORDER,
            Method::Bdf => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corrector {
    Functional,
    Newton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_order: usize,
    /// Step budget for a single [`OdeSolver::advance_to`] call.
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// `None` selects functional iteration for Adams and Newton for BDF.
    pub corrector: Option<Corrector>,
}

impl OdeConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rtol: 1e-7,
            atol: 1e-12,
            max_order: method.default_order(),
            max_steps: 10_000,
            initial_step: None,
            corrector: None,
        }
    }

    pub fn adams() -> Self {
        Self::new(Method::Adams)
    }

    pub fn bdf() -> Self {
        Self::new(Method::Bdf)
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn with_corrector(mut self, corrector: Corrector) -> Self {
        self.corrector = Some(corrector);
        self
    }

    pub fn corrector(&self) -> Corrector {
        self.corrector.unwrap_or(match self.method {
            Method::Adams => Corrector::Functional,
            Method::Bdf => Corrector::Newton,
        })
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |msg: String| Err(OdeError::InvalidConfig(msg));
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return bad(format!("rtol must lie in (0, 1), got {}", self.rtol));
        }
        if !(self.atol >= 0.0) || !self.atol.is_finite() {
            return bad(format!("atol must be non-negative, got {}", self.atol));
        }
        if self.max_order == 0 || self.max_order > self.method.max_order() {
            return bad(format!(
                "max_order {} outside 1..={} for {:?}",
                self.max_order,
                self.method.max_order(),
                self.method
            ));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) || !h.is_finite() {
                return bad(format!("initial step must be positive, got {h}"));
            }
        }
        Ok(())
    }
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self::adams()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("initial state has a non-finite entry at index {0}")]
    NonFiniteInitial(usize),
    #[error("requested t = {requested} lies behind the solver time {current}")]
    BackwardTime { current: f64, requested: f64 },
    #[error("t = {t} lies outside the interpolation interval [{lo}, {hi}]")]
    OutsideInterval { t: f64, lo: f64, hi: f64 },
    #[error("more than {steps} steps taken before reaching t = {target} (stopped at t = {t})")]
    TooManySteps { t: f64, target: f64, steps: usize },
    #[error("repeated error test failures at t = {t}, h = {h:e}")]
    ErrorTestFailures { t: f64, h: f64 },
    #[error("corrector failed to converge repeatedly at t = {t}, h = {h:e}")]
    ConvergenceFailures { t: f64, h: f64 },
    #[error("step size collapsed to {h:e} at t = {t}")]
    StepSizeCollapse { t: f64, h: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
}

impl OdeError {
    /// Status code in the convention of the LSODE/VODE family (negative on
    /// failure), for diagnostics.
    pub fn istate(&self) -> i32 {
        match self {
            OdeError::TooManySteps { .. } => -1,
            OdeError::InvalidConfig(_)
            | OdeError::NonFiniteInitial(_)
            | OdeError::BackwardTime { .. }
            | OdeError::OutsideInterval { .. } => -3,
            OdeError::ErrorTestFailures { .. } | OdeError::StepSizeCollapse { .. } => -4,
            OdeError::ConvergenceFailures { .. } => -5,
            OdeError::NonFiniteState { .. } => -6,
        }
    }
}

/// Right-hand side of y' = f(t, y).
pub trait OdeRhs {
    fn eval(&self, t: f64, y: &[Complex128], ydot: &mut [Complex128]);

    /// Analytic Jacobian ∂f/∂y. `None` makes the solver difference columns.
    fn jacobian(&self, _t: f64, _y: &[Complex128]) -> Option<DenseMatrix> {
        None
    }

    /// True when ∂f/∂y never changes (linear constant-coefficient systems).
    fn constant_jacobian(&self) -> bool {
        false
    }
}

impl<R: OdeRhs + ?Sized> OdeRhs for &R {
    fn eval(&self, t: f64, y: &[Complex128], ydot: &mut [Complex128]) {
        (**self).eval(t, y, ydot)
    }
    fn jacobian(&self, t: f64, y: &[Complex128]) -> Option<DenseMatrix> {
        (**self).jacobian(t, y)
    }
    fn constant_jacobian(&self) -> bool {
        (**self).constant_jacobian()
    }
}

/// Adapts a closure `(t, y, ydot)` into an [`OdeRhs`] without a Jacobian.
pub struct FnRhs<F>(pub F);

impl<F> OdeRhs for FnRhs<F>
where
    F: Fn(f64, &[Complex128], &mut [Complex128]),
{
    fn eval(&self, t: f64, y: &[Complex128], ydot: &mut [Complex128]) {
        (self.0)(t, y, ydot)
    }
}

/// Closure right-hand side paired with an analytic Jacobian closure.
pub struct FnRhsWithJacobian<F, J> {
    pub rhs: F,
    pub jac: J,
}

impl<F, J> OdeRhs for FnRhsWithJacobian<F, J>
where
    F: Fn(f64, &[Complex128], &mut [Complex128]),
    J: Fn(f64, &[Complex128]) -> DenseMatrix,
{
    fn eval(&self, t: f64, y: &[Complex128], ydot: &mut [Complex128]) {
        (self.rhs)(t, y, ydot)
    }
    fn jacobian(&self, t: f64, y: &[Complex128]) -> Option<DenseMatrix> {
        Some((self.jac)(t, y))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub steps: u64,
    pub rhs_evals: u64,
    pub jacobian_evals: u64,
    pub lu_decompositions: u64,
    pub corrector_iterations: u64,
    pub error_test_failures: u64,
    pub convergence_failures: u64,
}

/// Method coefficients for every order: `el[q]` is the Nordsieck correction
/// vector of order q, `tq[q]` holds the error constants used for the order
/// q−1, q and q+1 estimates.
#[derive(Debug, Clone)]
struct Coefficients {
    el: Vec<[f64; 13]>,
    tq: Vec<[f64; 3]>,
}

impl Coefficients {
    fn new(method: Method) -> Self {
        let mut el = vec![[0.0; 13]; 14];
        let mut tq = vec![[0.0; 3]; 14];
        let mut pc = [0.0f64; 13];
        match method {
            Method::Adams => {
                el[1][0] = 1.0;
                el[1][1] = 1.0;
                tq[1][0] = 0.0;
                tq[1][1] = 2.0;
                tq[2][0] = 1.0;
                tq[12][2] = 0.0;
                pc[0] = 1.0;
                let mut rqfac = 1.0;
                for nq in 2..=ADAMS_MAX_ORDER {
                    // pc holds the coefficients of p(x) = (x+1)(x+2)...(x+nq−1).
                    let rq1fac = rqfac;
                    rqfac /= nq as f64;
                    let fnqm1 = (nq - 1) as f64;
                    pc[nq - 1] = 0.0;
                    for i in (1..nq).rev() {
                        pc[i] = pc[i - 1] + fnqm1 * pc[i];
                    }
                    pc[0] *= fnqm1;
                    // ∫ from −1 to 0 of p(x) and of x·p(x).
                    let mut pint = pc[0];
                    let mut xpin = pc[0] / 2.0;
                    let mut tsign = 1.0;
                    for i in 2..=nq {
                        tsign = -tsign;
                        pint += tsign * pc[i - 1] / i as f64;
                        xpin += tsign * pc[i - 1] / (i + 1) as f64;
                    }
                    el[nq][0] = pint * rq1fac;
                    el[nq][1] = 1.0;
                    for i in 2..=nq {
                        el[nq][i] = rq1fac * pc[i - 1] / i as f64;
                    }
                    let ragq = 1.0 / (rqfac * xpin);
                    tq[nq][1] = ragq;
                    if nq < ADAMS_MAX_ORDER {
                        tq[nq + 1][0] = ragq * rqfac / (nq + 1) as f64;
                    }
                    tq[nq - 1][2] = ragq;
                }
            }
            Method::Bdf => {
                // pc holds the coefficients of x(x+1)...(x+nq−1).
                pc[0] = 1.0;
                let mut rq1fac = 1.0;
                for nq in 1..=BDF_MAX_ORDER {
                    let fnq = nq as f64;
                    pc[nq] = 0.0;
                    for i in (1..=nq).rev() {
                        pc[i] = pc[i - 1] + fnq * pc[i];
                    }
                    pc[0] *= fnq;
                    for i in 0..=nq {
                        el[nq][i] = pc[i] / pc[1];
                    }
                    el[nq][1] = 1.0;
                    tq[nq][0] = rq1fac;
                    tq[nq][1] = (nq + 1) as f64 / el[nq][0];
                    tq[nq][2] = (nq + 2) as f64 / el[nq][0];
                    rq1fac /= fnq;
                }
            }
        }
        Self { el, tq }
    }
}

enum CorrectorOutcome {
    Converged { del: f64, iters: usize },
    Failed,
}

/// One integration instance. Instances are independent and own all their
/// workspace, so any number may run concurrently.
pub struct OdeSolver<R> {
    rhs: R,
    cfg: OdeConfig,
    corrector: Corrector,
    coeffs: Coefficients,
    n: usize,
    tn: f64,
    h: f64,
    hu: f64,
    nq: usize,
    ialth: usize,
    rmax: f64,
    crate_: f64,
    /// Nordsieck columns 0..=max_order; column max_order doubles as storage for
    /// the previous correction while the order is below the maximum.
    yh: Vec<Vec<Complex128>>,
    acor: Vec<Complex128>,
    savf: Vec<Complex128>,
    y: Vec<Complex128>,
    ewt: Vec<f64>,
    work: Vec<Complex128>,
    lu: Option<LuFactors>,
    rc_lu: f64,
    jac_step: u64,
    jac_fresh: bool,
    stop_time: Option<f64>,
    stats: OdeStats,
    last_iters: usize,
    last_matrix_current: bool,
}

impl<R: OdeRhs> OdeSolver<R> {
    /// Positions a solver at `(t0, y0)` with order 1. Unless the configuration
    /// fixes it, the first step is `h = 0.01 / ‖f(t0, y0)‖`, the norm being the
    /// weighted RMS norm of the error test.
    pub fn new(config: OdeConfig, rhs: R, t0: f64, y0: &[Complex128]) -> Result<Self, OdeError> {
        config.validate()?;
        if y0.is_empty() {
            return Err(OdeError::InvalidConfig("empty initial state".into()));
        }
        if let Some(idx) = y0.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(OdeError::NonFiniteInitial(idx));
        }
        if !t0.is_finite() {
            return Err(OdeError::InvalidConfig(format!("initial time {t0} is not finite")));
        }
        let n = y0.len();
        let coeffs = Coefficients::new(config.method);
        let mut s = Self {
            corrector: config.corrector(),
            yh: vec![vec![ZERO; n]; config.max_order + 1],
            rhs,
            coeffs,
            n,
            tn: t0,
            h: 0.0,
            hu: 0.0,
            nq: 1,
            ialth: 2,
            rmax: MAX_STEP_RATIO,
            crate_: 0.7,
            acor: vec![ZERO; n],
            savf: vec![ZERO; n],
            y: vec![ZERO; n],
            ewt: vec![0.0; n],
            work: vec![ZERO; n],
            lu: None,
            rc_lu: 0.0,
            jac_step: 0,
            jac_fresh: false,
            stop_time: None,
            stats: OdeStats::default(),
            last_iters: 0,
            last_matrix_current: false,
            cfg: config,
        };
        s.yh[0].copy_from_slice(y0);
        s.rhs.eval(t0, y0, &mut s.savf);
        s.stats.rhs_evals += 1;
        s.update_weights();
        let h0 = match s.cfg.initial_step {
            Some(h) => h,
            None => {
                let fnorm = s.wrms(&s.savf);
                if fnorm > 0.0 && fnorm.is_finite() {
                    0.01 / fnorm
                } else {
                    1e-6 * t0.abs().max(1.0)
                }
            }
        };
        s.h = h0;
        for (z, f) in s.yh[1].iter_mut().zip(&s.savf) {
            *z = f * h0;
        }
        Ok(s)
    }

    pub fn t(&self) -> f64 {
        self.tn
    }

    /// Solution at the current time.
    pub fn y(&self) -> &[Complex128] {
        &self.yh[0]
    }

    /// Size of the next step to be attempted.
    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Size of the last successful step (zero before the first).
    pub fn last_step(&self) -> f64 {
        self.hu
    }

    pub fn order(&self) -> usize {
        self.nq
    }

    pub fn stats(&self) -> OdeStats {
        self.stats
    }

    pub fn config(&self) -> &OdeConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Corrector iterations used by the last successful step.
    pub fn last_step_iterations(&self) -> usize {
        self.last_iters
    }

    /// Whether the last successful step ran Newton with an iteration matrix
    /// built for exactly its `h·l₀`.
    pub fn last_step_matrix_current(&self) -> bool {
        self.last_matrix_current
    }

    /// Steps are shortened so that the solver never passes `t_stop`; a step
    /// that is cut lands on `t_stop` exactly.
    pub fn set_stop_time(&mut self, t_stop: Option<f64>) {
        self.stop_time = t_stop;
    }

    fn update_weights(&mut self) {
        let (rtol, atol) = (self.cfg.rtol, self.cfg.atol);
        for (w, z) in self.ewt.iter_mut().zip(&self.yh[0]) {
            *w = 1.0 / (rtol * z.norm() + atol);
        }
    }

    fn wrms(&self, v: &[Complex128]) -> f64 {
        let s: f64 = v.iter().zip(&self.ewt).map(|(z, w)| z.norm_sqr() * w * w).sum();
        (s / self.n as f64).sqrt()
    }

    fn el(&self) -> &[f64; 13] {
        &self.coeffs.el[self.nq]
    }

    fn tq(&self) -> &[f64; 3] {
        &self.coeffs.tq[self.nq]
    }

    fn rescale(&mut self, rh: f64) {
        let mut r = 1.0;
        for j in 1..=self.nq {
            r *= rh;
            for z in &mut self.yh[j] {
                *z *= r;
            }
        }
        self.h *= rh;
        self.ialth = self.nq + 1;
    }

    fn predict(&mut self) {
        let q = self.nq;
        for jb in 1..=q {
            for c in q - jb..q {
                let (lo, hi) = self.yh.split_at_mut(c + 1);
                for (a, b) in lo[c].iter_mut().zip(&hi[0]) {
                    *a += b;
                }
            }
        }
    }

    fn retract(&mut self) {
        let q = self.nq;
        for jb in 1..=q {
            for c in q - jb..q {
                let (lo, hi) = self.yh.split_at_mut(c + 1);
                for (a, b) in lo[c].iter_mut().zip(&hi[0]) {
                    *a -= b;
                }
            }
        }
    }

    fn build_iteration_matrix(&mut self) -> bool {
        let rc = self.h * self.el()[0];
        let jac = match self.rhs.jacobian(self.tn, &self.yh[0]) {
            Some(j) => j,
            None => self.difference_jacobian(),
        };
        self.stats.jacobian_evals += 1;
        let n = self.n;
        let mut p = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] = jac.get(i, j) * (-rc);
            }
            p[i * n + i] += 1.0;
        }
        self.jac_step = self.stats.steps;
        self.jac_fresh = true;
        self.crate_ = 0.7;
        self.stats.lu_decompositions += 1;
        match DenseMatrix::from_row_major(n, p).and_then(|m| m.lu()) {
            Ok(lu) => {
                self.lu = Some(lu);
                self.rc_lu = rc;
                true
            }
            Err(_) => {
                self.lu = None;
                false
            }
        }
    }

    /// Forward-difference Jacobian at the predicted state; `savf` must hold
    /// f at that state.
    fn difference_jacobian(&mut self) -> DenseMatrix {
        let n = self.n;
        let srur = f64::EPSILON.sqrt();
        let fac = self.wrms(&self.savf);
        let mut r0 = 1000.0 * self.h.abs() * f64::EPSILON * n as f64 * fac;
        if r0 == 0.0 {
            r0 = 1.0;
        }
        let mut jac = DenseMatrix::zeros(n).expect("n >= 1");
        let mut y = self.yh[0].clone();
        let mut ftem = vec![ZERO; n];
        for j in 0..n {
            let saved = y[j];
            let delta = (srur * saved.norm()).max(r0 / self.ewt[j]);
            y[j] += delta;
            self.rhs.eval(self.tn, &y, &mut ftem);
            self.stats.rhs_evals += 1;
            for i in 0..n {
                jac.set(i, j, (ftem[i] - self.savf[i]) / delta);
            }
            y[j] = saved;
        }
        jac
    }

    fn needs_new_matrix(&self) -> bool {
        let Some(_) = &self.lu else { return true };
        let rc = self.h * self.el()[0];
        if (rc / self.rc_lu - 1.0).abs() > REFACTOR_RATIO {
            return true;
        }
        !self.rhs.constant_jacobian() && self.stats.steps >= self.jac_step + STEPS_BETWEEN_JACOBIANS
    }

    fn correct(&mut self) -> CorrectorOutcome {
        let n = self.n;
        let conit = 0.5 / (self.nq + 2) as f64;
        let newton = self.corrector == Corrector::Newton;
        self.jac_fresh = false;
        self.rhs.eval(self.tn, &self.yh[0], &mut self.savf);
        self.stats.rhs_evals += 1;
        if newton && self.needs_new_matrix() && !self.build_iteration_matrix() {
            return CorrectorOutcome::Failed;
        }
        'restart: loop {
            self.acor.iter_mut().for_each(|a| *a = ZERO);
            let mut delp = 0.0;
            let mut m = 0;
            loop {
                let h = self.h;
                let el0 = self.el()[0];
                let del;
                if newton {
                    for i in 0..n {
                        self.work[i] = self.savf[i] * h - (self.yh[1][i] + self.acor[i]);
                    }
                    let lu = self.lu.as_ref().expect("iteration matrix");
                    lu.solve_in_place(&mut self.work).expect("dimensions agree");
                    let rc = h * el0;
                    if self.cfg.method == Method::Bdf && rc != self.rc_lu {
                        let cscale = 2.0 / (1.0 + rc / self.rc_lu);
                        self.work.iter_mut().for_each(|x| *x *= cscale);
                    }
                    del = self.wrms(&self.work);
                    for i in 0..n {
                        self.acor[i] += self.work[i];
                        self.y[i] = self.yh[0][i] + self.acor[i] * el0;
                    }
                } else {
                    for i in 0..n {
                        self.savf[i] = self.savf[i] * h - self.yh[1][i];
                        self.work[i] = self.savf[i] - self.acor[i];
                    }
                    del = self.wrms(&self.work);
                    for i in 0..n {
                        self.y[i] = self.yh[0][i] + self.savf[i] * el0;
                        self.acor[i] = self.savf[i];
                    }
                }
                self.stats.corrector_iterations += 1;
                if !del.is_finite() {
                    return CorrectorOutcome::Failed;
                }
                if m > 0 {
                    self.crate_ = (0.2 * self.crate_).max(del / delp);
                }
                let dcon = del * (1.5 * self.crate_).min(1.0) / (self.tq()[1] * conit);
                if dcon <= 1.0 {
                    return CorrectorOutcome::Converged { del, iters: m + 1 };
                }
                m += 1;
                if m == MAX_CORRECTOR_ITERS || (m >= 2 && del > 2.0 * delp) {
                    if newton && !self.jac_fresh {
                        // Stale matrix: rebuild at the predicted state and retry.
                        self.rhs.eval(self.tn, &self.yh[0], &mut self.savf);
                        self.stats.rhs_evals += 1;
                        if !self.build_iteration_matrix() {
                            return CorrectorOutcome::Failed;
                        }
                        continue 'restart;
                    }
                    return CorrectorOutcome::Failed;
                }
                delp = del;
                self.rhs.eval(self.tn, &self.y, &mut self.savf);
                self.stats.rhs_evals += 1;
            }
        }
    }

    fn set_order(&mut self, q: usize) {
        self.nq = q;
        self.ialth = q + 1;
    }

    /// Takes one successful internal step, retrying internally after error
    /// test or corrector failures.
    pub fn step(&mut self) -> Result<(), OdeError> {
        let told = self.tn;
        let mut error_failures = 0u32;
        let mut conv_failures = 0usize;
        loop {
            let mut land_on_stop = false;
            if let Some(ts) = self.stop_time {
                let remaining = ts - self.tn;
                if remaining <= 0.0 {
                    return Err(OdeError::BackwardTime {
                        current: self.tn,
                        requested: ts,
                    });
                }
                // Also stretch a step that would stop a few ulps short of ts.
                if self.h >= remaining || remaining - self.h <= 100.0 * f64::EPSILON * ts.abs() {
                    self.rescale(remaining / self.h);
                    land_on_stop = true;
                }
            }
            let hmin = 16.0 * f64::EPSILON * self.tn.abs().max(f64::MIN_POSITIVE);
            if !(self.h > hmin) {
                return Err(OdeError::StepSizeCollapse { t: self.tn, h: self.h });
            }
            self.update_weights();
            self.tn += self.h;
            self.predict();
            let outcome = self.correct();
            let (del, iters) = match outcome {
                CorrectorOutcome::Converged { del, iters } => (del, iters),
                CorrectorOutcome::Failed => {
                    self.stats.convergence_failures += 1;
                    conv_failures += 1;
                    self.retract();
                    self.tn = told;
                    if conv_failures >= MAX_CONV_FAILURES {
                        return Err(OdeError::ConvergenceFailures { t: self.tn, h: self.h });
                    }
                    self.rmax = 2.0;
                    self.rescale(0.25);
                    continue;
                }
            };
            let dsm = if iters == 1 {
                del / self.tq()[1]
            } else {
                self.wrms(&self.acor) / self.tq()[1]
            };
            if dsm <= 1.0 {
                self.accept(dsm, iters, land_on_stop);
                if self.yh[0].iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(OdeError::NonFiniteState { t: self.tn });
                }
                return Ok(());
            }

            // Error test failed: restore the history and retry with a smaller step.
            self.stats.error_test_failures += 1;
            error_failures += 1;
            self.retract();
            self.tn = told;
            self.rmax = 2.0;
            if error_failures >= 10 {
                return Err(OdeError::ErrorTestFailures { t: self.tn, h: self.h });
            }
            if error_failures >= 3 {
                // Drop to order 1 and rebuild the derivative column from f.
                self.rhs.eval(self.tn, &self.yh[0], &mut self.savf);
                self.stats.rhs_evals += 1;
                let h = self.h * MIN_STEP_RATIO;
                self.h = h;
                for (z, f) in self.yh[1].iter_mut().zip(&self.savf) {
                    *z = f * h;
                }
                self.set_order(1);
                self.ialth = 5;
                continue;
            }
            let (newq, mut rh) = self.select_order(dsm, None);
            rh = rh.min(1.0);
            if error_failures >= 2 {
                rh = rh.min(0.2);
            }
            rh = rh.max(MIN_STEP_RATIO);
            if newq != self.nq {
                self.set_order(newq);
            }
            self.rescale(rh);
        }
    }

    /// Returns the order and step ratio maximising the step size among the
    /// estimates for orders q−1, q and (when `dup` is given) q+1.
    fn select_order(&self, dsm: f64, dup: Option<f64>) -> (usize, f64) {
        let q = self.nq;
        let rhsm = 1.0 / (1.2 * dsm.powf(1.0 / (q + 1) as f64) + 1.2e-6);
        let rhup = dup.map_or(0.0, |d| 1.0 / (1.4 * d.powf(1.0 / (q + 2) as f64) + 1.4e-6));
        let rhdn = if q > 1 {
            let ddn = self.wrms(&self.yh[q]) / self.tq()[0];
            1.0 / (1.3 * ddn.powf(1.0 / q as f64) + 1.3e-6)
        } else {
            0.0
        };
        if rhsm >= rhup && rhsm >= rhdn {
            (q, rhsm)
        } else if rhup > rhdn {
            (q + 1, rhup)
        } else {
            (q - 1, rhdn)
        }
    }

    fn accept(&mut self, dsm: f64, iters: usize, land_on_stop: bool) {
        self.stats.steps += 1;
        self.hu = self.h;
        self.last_iters = iters;
        self.last_matrix_current =
            self.corrector == Corrector::Newton && self.lu.is_some() && self.h * self.el()[0] == self.rc_lu;
        if land_on_stop {
            if let Some(ts) = self.stop_time {
                self.tn = ts;
            }
        }
        let q = self.nq;
        let el = *self.el();
        for j in 0..=q {
            let c = el[j];
            for (z, a) in self.yh[j].iter_mut().zip(&self.acor) {
                *z += a * c;
            }
        }
        self.ialth -= 1;
        let maxord = self.cfg.max_order;
        if self.ialth == 0 {
            let dup = if q < maxord {
                for i in 0..self.n {
                    self.work[i] = self.acor[i] - self.yh[maxord][i];
                }
                Some(self.wrms(&self.work) / self.tq()[2])
            } else {
                None
            };
            let (newq, rh) = self.select_order(dsm, dup);
            if rh < 1.1 {
                self.ialth = 3;
            } else {
                let rh = rh.min(self.rmax);
                if newq > q {
                    let r = el[q] / (q + 1) as f64;
                    for i in 0..self.n {
                        self.yh[newq][i] = self.acor[i] * r;
                    }
                }
                self.set_order(newq);
                self.rescale(rh);
                self.rmax = MAX_STEP_RATIO;
            }
        } else if self.ialth == 1 && q < maxord {
            self.yh[maxord].copy_from_slice(&self.acor);
        }
    }

    /// Evaluates the interpolating polynomial at `t`, which must lie within the
    /// last successful step `[t − hu, t]`.
    pub fn interpolate_at(&self, t: f64) -> Result<DenseVector, OdeError> {
        if t == self.tn {
            return Ok(DenseVector::new(self.yh[0].clone()).expect("non-empty"));
        }
        let fuzz = 100.0 * f64::EPSILON * (self.tn.abs() + self.hu.abs());
        let lo = self.tn - self.hu;
        if t < lo - fuzz || t > self.tn + fuzz {
            return Err(OdeError::OutsideInterval { t, lo, hi: self.tn });
        }
        let s = (t - self.tn) / self.h;
        let mut y = self.yh[self.nq].clone();
        for j in (0..self.nq).rev() {
            for (a, b) in y.iter_mut().zip(&self.yh[j]) {
                *a = b + *a * s;
            }
        }
        Ok(DenseVector::new(y).expect("non-empty"))
    }

    /// Integrates forward to `t_out` and returns y(t_out), interpolated from
    /// the step that passes it.
    pub fn advance_to(&mut self, t_out: f64) -> Result<DenseVector, OdeError> {
        if t_out < self.tn - self.hu - 100.0 * f64::EPSILON * self.tn.abs() {
            return Err(OdeError::BackwardTime {
                current: self.tn,
                requested: t_out,
            });
        }
        let mut taken = 0usize;
        while self.tn < t_out {
            if taken >= self.cfg.max_steps {
                return Err(OdeError::TooManySteps {
                    t: self.tn,
                    target: t_out,
                    steps: taken,
                });
            }
            if self.stats.steps == 0 && self.h > t_out - self.tn {
                self.rescale((t_out - self.tn) / self.h);
            }
            self.step()?;
            taken += 1;
        }
        self.interpolate_at(t_out)
    }

    /// Squared norm of the current solution.
    pub fn norm_sq(&self) -> f64 {
        norm_sq_slice(&self.yh[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Complex128 as C;

    fn decay() -> FnRhs<impl Fn(f64, &[C], &mut [C])> {
        FnRhs(|_t: f64, y: &[C], d: &mut [C]| d[0] = -y[0])
    }

    fn rotation() -> FnRhs<impl Fn(f64, &[C], &mut [C])> {
        FnRhs(|_t: f64, y: &[C], d: &mut [C]| d[0] = C::new(0.0, 1.0) * y[0])
    }

    fn stiff() -> FnRhsWithJacobian<impl Fn(f64, &[C], &mut [C]), impl Fn(f64, &[C]) -> DenseMatrix> {
        FnRhsWithJacobian {
            rhs: |t: f64, y: &[C], d: &mut [C]| d[0] = C::new(t.cos(), 0.0) - (y[0] - C::new(t.sin(), 0.0)) * 1000.0,
            jac: |_t: f64, _y: &[C]| DenseMatrix::from_real(1, &[-1000.0]).unwrap(),
        }
    }

    #[test]
    fn coefficient_tables_match_known_methods() {
        let a = Coefficients::new(Method::Adams);
        // Trapezoidal rule in Nordsieck form: l = (1/2, 1, 1/2), error constant 1/12.
        assert_eq!(a.el[2][..3], [0.5, 1.0, 0.5]);
        assert!((a.tq[2][1] - 12.0).abs() < 1e-12);
        let b = Coefficients::new(Method::Bdf);
        assert_eq!(b.el[1][..2], [1.0, 1.0]);
        // BDF2 in Nordsieck form: l = (2/3, 1, 1/3).
        assert!((b.el[2][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.el[2][2] - 1.0 / 3.0).abs() < 1e-15);
        for q in 1..=12 {
            assert_eq!(a.el[q][1], 1.0);
            assert!(a.tq[q][1] > 0.0);
        }
    }

    #[test]
    fn create_positions_solver_and_zeroes_stats() {
        let s = OdeSolver::new(OdeConfig::adams(), decay(), 0.5, &[C::new(1.0, 0.0)]).unwrap();
        assert_eq!(s.t(), 0.5);
        assert_eq!(s.y(), &[C::new(1.0, 0.0)]);
        assert_eq!(s.order(), 1);
        let st = s.stats();
        assert_eq!((st.steps, st.error_test_failures, st.convergence_failures), (0, 0, 0));
    }

    #[test]
    fn create_rejects_bad_config() {
        let mut cfg = OdeConfig::adams();
        cfg.max_order = 13;
        assert!(matches!(
            OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]),
            Err(OdeError::InvalidConfig(_))
        ));
        let mut cfg = OdeConfig::bdf();
        cfg.max_order = 7;
        assert!(OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]).is_err());
        let cfg = OdeConfig::adams().with_tolerances(0.0, 1e-12);
        assert!(OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]).is_err());
        let cfg = OdeConfig::adams().with_tolerances(1e-6, -1.0);
        assert!(OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]).is_err());
        assert!(matches!(
            OdeSolver::new(OdeConfig::adams(), decay(), 0.0, &[C::new(f64::NAN, 0.0)]),
            Err(OdeError::NonFiniteInitial(0))
        ));
    }

    #[test]
    fn automatic_initial_step_bound() {
        let y0 = [C::new(2.0, -1.0), C::new(0.0, 0.5)];
        let f = |_t: f64, y: &[C], d: &mut [C]| {
            d[0] = y[1] * 3.0;
            d[1] = -y[0] + C::new(0.0, 7.0) * y[1];
        };
        let cfg = OdeConfig::adams().with_tolerances(1e-6, 1e-9);
        let s = OdeSolver::new(cfg.clone(), FnRhs(f), 0.0, &y0).unwrap();
        let h = s.step_size();
        // Oracle: evaluate the weighted norm of h·f directly.
        let mut d = [C::new(0.0, 0.0); 2];
        f(0.0, &y0, &mut d);
        let norm = (d
            .iter()
            .zip(&y0)
            .map(|(fi, yi)| ((h * fi.norm()) / (cfg.atol + cfg.rtol * yi.norm())).powi(2))
            .sum::<f64>()
            / 2.0)
            .sqrt();
        assert!(norm <= 0.01 * (1.0 + 1e-12), "{norm}");
        assert!(norm >= 0.0099);
    }

    #[test]
    fn exponential_decay() {
        let cfg = OdeConfig::adams().with_tolerances(1e-8, 1e-12);
        let mut s = OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        let y = s.advance_to(1.0).unwrap();
        assert!((y[0].re - 0.367_879_44).abs() < 1e-7);
        assert!((y[0].re - (-1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rotation_full_period() {
        for cfg in [OdeConfig::adams(), OdeConfig::bdf()] {
            let cfg = cfg.with_tolerances(1e-9, 1e-12);
            let mut s = OdeSolver::new(cfg, rotation(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
            let y = s.advance_to(2.0 * std::f64::consts::PI).unwrap();
            assert!((y[0].norm() - 1.0).abs() < 1e-6, "{:?}", y[0]);
            assert!(y[0].arg().abs() < 1e-6, "{:?}", y[0]);
        }
    }

    #[test]
    fn stiff_problem_with_bdf() {
        let cfg = OdeConfig::bdf().with_tolerances(1e-8, 1e-12);
        let mut s = OdeSolver::new(cfg, stiff(), 0.0, &[C::new(0.0, 0.0)]).unwrap();
        let y = s.advance_to(1.0).unwrap();
        let err = (y[0].re - 1f64.sin()).abs();
        assert!(err < 1e-6, "{err}");
        let steps = s.stats().steps;
        assert!(steps <= 500, "{steps}");

        // Explicit Euler oracle: halve h until it is as accurate as BDF.
        let mut n = 500u64;
        loop {
            let h = 1.0 / n as f64;
            let mut y = 0.0f64;
            for k in 0..n {
                let t = k as f64 * h;
                y += h * (t.cos() - 1000.0 * (y - t.sin()));
            }
            if (y - 1f64.sin()).abs() <= err.max(1e-12) {
                break;
            }
            n *= 2;
        }
        assert!((steps as f64) < 0.05 * n as f64, "bdf {steps} vs euler {n}");
    }

    #[test]
    fn stiff_problem_with_difference_jacobian() {
        let f = |t: f64, y: &[C], d: &mut [C]| d[0] = C::new(t.cos(), 0.0) - (y[0] - C::new(t.sin(), 0.0)) * 1000.0;
        let cfg = OdeConfig::bdf().with_tolerances(1e-8, 1e-12);
        let mut s = OdeSolver::new(cfg, FnRhs(f), 0.0, &[C::new(0.0, 0.0)]).unwrap();
        let y = s.advance_to(1.0).unwrap();
        assert!((y[0].re - 1f64.sin()).abs() < 1e-6);
        assert!(s.stats().jacobian_evals > 0);
    }

    #[test]
    fn interpolation_at_endpoint_is_exact() {
        let mut s = OdeSolver::new(OdeConfig::adams(), decay(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        s.advance_to(0.3).unwrap();
        let t = s.t();
        assert_eq!(s.interpolate_at(t).unwrap().as_slice(), s.y());
        assert!(matches!(s.interpolate_at(t + 1.0), Err(OdeError::OutsideInterval { .. })));
        assert!(s.interpolate_at(t - 2.0 * s.last_step()).is_err());
    }

    #[test]
    fn interpolation_reproduces_linear_solutions() {
        let c = C::new(0.3, -1.2);
        let f = move |_t: f64, _y: &[C], d: &mut [C]| d[0] = c;
        let mut s = OdeSolver::new(OdeConfig::adams(), FnRhs(f), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        for _ in 0..6 {
            s.step().unwrap();
        }
        let (t, hu) = (s.t(), s.last_step());
        for frac in [0.0, 0.25, 0.5, 0.9] {
            let tq = t - frac * hu;
            let y = s.interpolate_at(tq).unwrap();
            assert!((y[0] - (C::new(1.0, 0.0) + c * tq)).norm() < 1e-13);
        }
    }

    #[test]
    fn interpolation_midpoint_accuracy() {
        let cfg = OdeConfig::adams().with_tolerances(1e-8, 1e-12);
        let mut s = OdeSolver::new(cfg, decay(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        while s.t() < 1.0 {
            s.step().unwrap();
        }
        let tm = s.t() - 0.5 * s.last_step();
        let y = s.interpolate_at(tm).unwrap();
        assert!((y[0].re - (-tm).exp()).abs() < 1e-7);
    }

    #[test]
    fn backward_requests_are_rejected() {
        let mut s = OdeSolver::new(OdeConfig::adams(), decay(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        s.advance_to(1.0).unwrap();
        assert!(matches!(s.advance_to(-1.0), Err(OdeError::BackwardTime { .. })));
    }

    #[test]
    fn step_budget_is_enforced() {
        let mut cfg = OdeConfig::adams().with_tolerances(1e-10, 1e-14);
        cfg.max_steps = 5;
        let mut s = OdeSolver::new(cfg, rotation(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        let e = s.advance_to(100.0).unwrap_err();
        assert!(matches!(e, OdeError::TooManySteps { .. }));
        assert_eq!(e.istate(), -1);
    }

    #[test]
    fn stop_time_is_landed_exactly() {
        let mut s = OdeSolver::new(OdeConfig::adams(), rotation(), 0.0, &[C::new(1.0, 0.0)]).unwrap();
        s.set_stop_time(Some(0.7));
        while s.t() < 0.7 {
            s.step().unwrap();
        }
        assert_eq!(s.t(), 0.7);
        assert!(s.step().is_err());
    }

    #[test]
    fn step_a_few_ulps_short_of_stop_time_lands_on_it() {
        let mut cfg = OdeConfig::adams();
        cfg.initial_step = Some(10.0 - 8.0 * f64::EPSILON);
        let still = FnRhs(|_t: f64, _y: &[C], d: &mut [C]| d[0] = C::new(0.0, 0.0));
        let mut s = OdeSolver::new(cfg, still, 0.0, &[C::new(1.0, 0.0)]).unwrap();
        s.set_stop_time(Some(10.0));
        s.step().unwrap();
        assert_eq!(s.t(), 10.0);
    }

    #[test]
    fn newton_on_linear_problem_converges_fast() {
        let g = DenseMatrix::from_row_major(
            2,
            vec![C::new(-0.1, 0.0), C::new(0.0, -2.0), C::new(0.0, -2.0), C::new(-0.3, 0.0)],
        )
        .unwrap();
        let g2 = g.clone();
        let rhs = FnRhsWithJacobian {
            rhs: move |_t: f64, y: &[C], d: &mut [C]| {
                let v = g.matvec(&DenseVector::new(y.to_vec()).unwrap()).unwrap();
                d.copy_from_slice(v.as_slice());
            },
            jac: move |_t: f64, _y: &[C]| g2.clone(),
        };
        let cfg = OdeConfig::bdf().with_tolerances(1e-8, 1e-12);
        let mut s = OdeSolver::new(cfg, rhs, 0.0, &[C::new(1.0, 0.0), C::new(0.0, 0.0)]).unwrap();
        let mut checked = 0;
        while s.t() < 5.0 {
            s.step().unwrap();
            if s.last_step_matrix_current() {
                assert!(s.last_step_iterations() <= 2, "{}", s.last_step_iterations());
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn rejected_steps_do_not_advance_time() {
        let cfg = OdeConfig::adams().with_tolerances(1e-10, 1e-14);
        let mut s = OdeSolver::new(cfg, stiff(), 0.0, &[C::new(0.0, 0.0)]).unwrap();
        let mut prev = s.stats();
        let mut t_prev = s.t();
        for _ in 0..300 {
            s.step().unwrap();
            let st = s.stats();
            assert!(st.steps == prev.steps + 1);
            assert!(st.rhs_evals > prev.rhs_evals);
            assert!(st.error_test_failures >= prev.error_test_failures);
            assert!(st.convergence_failures >= prev.convergence_failures);
            assert!(st.corrector_iterations > prev.corrector_iterations);
            assert!(s.t() > t_prev);
            assert!((s.t() - t_prev - s.last_step()).abs() <= 1e-12 * s.t().abs().max(1.0));
            prev = st;
            t_prev = s.t();
        }
    }
}
