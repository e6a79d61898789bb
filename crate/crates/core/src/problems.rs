//! The four benchmark problems: driven qubit with weak dephasing-type
//! collapse ("unitary"), trilinear three-mode coupling, Jaynes–Cummings
//! collapse and revival, and a one-photon cavity decay at finite temperature.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::linalg::{Complex128, DenseMatrix, DenseVector, LinalgError};
use crate::ode::OdeConfig;
use crate::operators::{coherent, destroy, effective_generator, eye, fock, sigma_minus, sigma_x, sigma_z, OperatorSet};
use crate::trajectory::{uniform_grid, Generator, QuantumProblem, RunOptions};

pub const TRILINEAR_MODES: usize = 8;
pub const TRILINEAR_GAMMA: [f64; 3] = [0.1, 0.1, 0.4];
pub const JCM_LEVELS: usize = 40;
pub const JCM_COUPLING: f64 = 1.0;
pub const JCM_DETUNING: f64 = -0.1;
pub const JCM_ALPHA: f64 = 4.0;
pub const PHOTON_LEVELS: usize = 5;
pub const PHOTON_KAPPA: f64 = 1.0 / 0.129;
pub const PHOTON_NTH: f64 = 0.063;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Unitary,
    Trilinear,
    Jcm,
    Photon,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::Unitary,
        ProblemKind::Trilinear,
        ProblemKind::Jcm,
        ProblemKind::Photon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Unitary => "unitary",
            ProblemKind::Trilinear => "trilinear",
            ProblemKind::Jcm => "jcm",
            ProblemKind::Photon => "photon",
        }
    }

    pub fn benchmark(self) -> Result<Benchmark, LinalgError> {
        match self {
            ProblemKind::Unitary => unitary(),
            ProblemKind::Trilinear => trilinear(),
            ProblemKind::Jcm => jcm(),
            ProblemKind::Photon => photon(),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown problem '{s}' (expected unitary, trilinear, jcm or photon)"))
    }
}

/// Operators, initial state and default output grid of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub kind: ProblemKind,
    pub ops: OperatorSet,
    pub psi0: DenseVector,
    pub t_from: f64,
    pub t_to: f64,
    pub n_steps: usize,
}

impl Benchmark {
    pub fn without_collapse(mut self) -> Self {
        self.ops.collapse.clear();
        self
    }

    /// Trajectory problem with the default ODE settings (Adams, rtol 1e−7).
    pub fn problem(&self) -> Result<QuantumProblem, LinalgError> {
        self.problem_with(OdeConfig::adams())
    }

    pub fn problem_with(&self, ode: OdeConfig) -> Result<QuantumProblem, LinalgError> {
        let csr = |m: &DenseMatrix| m.to_csr(0.0);
        Ok(QuantumProblem {
            generator: Generator::Constant(effective_generator(&self.ops)?.g),
            collapse: self.ops.collapse.iter().map(csr).collect::<Result<_, _>>()?,
            expect: self.ops.expect.iter().map(csr).collect::<Result<_, _>>()?,
            psi0: self.psi0.clone(),
            t_from: self.t_from,
            t_to: self.t_to,
            n_steps: self.n_steps,
            ode,
            options: RunOptions::default(),
        })
    }

    /// |ψ₀⟩⟨ψ₀|.
    pub fn rho0(&self) -> DenseMatrix {
        let n = self.psi0.dim();
        let mut rho = DenseMatrix::zeros(n).expect("n >= 1");
        for i in 0..n {
            for j in 0..n {
                rho.set(i, j, self.psi0[i] * self.psi0[j].conj());
            }
        }
        rho
    }

    pub fn times(&self) -> Vec<f64> {
        uniform_grid(self.t_from, self.t_to, self.n_steps)
    }
}

fn real(x: f64) -> Complex128 {
    Complex128::new(x, 0.0)
}

/// H = (2π/10)σx, C₀ = 0.05σx, E₀ = σz, ψ₀ = |0⟩ on t ∈ [0, 10].
pub fn unitary() -> Result<Benchmark, LinalgError> {
    let ops = OperatorSet::new(
        sigma_x().scale_real(2.0 * PI / 10.0),
        vec![sigma_x().scale_real(0.05)],
        vec![sigma_z()],
    )?;
    Ok(Benchmark {
        kind: ProblemKind::Unitary,
        ops,
        psi0: DenseVector::basis(2, 0)?,
        t_from: 0.0,
        t_to: 10.0,
        n_steps: 200,
    })
}

/// Three 8-level modes, H = iK(a b† c† − a† b c) with K = 1, collapse
/// √(2γₖ)·aₖ, expectations nₖ; ψ₀ = |√3⟩ ⊗ |0⟩ ⊗ |0⟩ on t ∈ [0, 4].
pub fn trilinear() -> Result<Benchmark, LinalgError> {
    let n = TRILINEAR_MODES;
    let (d, id) = (destroy(n)?, eye(n)?);
    let a = [
        DenseMatrix::tensor3(&d, &id, &id),
        DenseMatrix::tensor3(&id, &d, &id),
        DenseMatrix::tensor3(&id, &id, &d),
    ];
    let ad: Vec<DenseMatrix> = a.iter().map(DenseMatrix::dagger).collect();
    let k = 1.0;
    let create_pair = a[0].matmul(&ad[1])?.matmul(&ad[2])?;
    let destroy_pair = ad[0].matmul(&a[1])?.matmul(&a[2])?;
    let h = create_pair.sub(&destroy_pair)?.scale(Complex128::new(0.0, k));
    let collapse = a
        .iter()
        .zip(TRILINEAR_GAMMA)
        .map(|(ak, g)| ak.scale_real((2.0 * g).sqrt()))
        .collect();
    let expect = a
        .iter()
        .zip(&ad)
        .map(|(ak, akd)| akd.matmul(ak))
        .collect::<Result<Vec<_>, _>>()?;
    let vac = fock(n, 0)?;
    let psi0 = coherent(n, real(3f64.sqrt()))?.tensor(&vac).tensor(&vac);
    Ok(Benchmark {
        kind: ProblemKind::Trilinear,
        ops: OperatorSet::new(h, collapse, expect)?,
        psi0,
        t_from: 0.0,
        t_to: 4.0,
        n_steps: 200,
    })
}

/// Jaynes–Cummings model, N = 40, H = Δa†a + g(a†b + ab†), expectation b†b,
/// ψ₀ = |α = 4⟩ ⊗ |1⟩, no collapse, t ∈ [0, 35] with 600 steps.
pub fn jcm() -> Result<Benchmark, LinalgError> {
    let n = JCM_LEVELS;
    let a = destroy(n)?.tensor(&eye(2)?);
    let b = eye(n)?.tensor(&sigma_minus());
    let (ad, bd) = (a.dagger(), b.dagger());
    let h = ad
        .matmul(&a)?
        .scale_real(JCM_DETUNING)
        .add(&ad.matmul(&b)?.add(&a.matmul(&bd)?)?.scale_real(JCM_COUPLING))?;
    let psi0 = coherent(n, real(JCM_ALPHA))?.tensor(&DenseVector::basis(2, 1)?);
    Ok(Benchmark {
        kind: ProblemKind::Jcm,
        ops: OperatorSet::new(h, vec![], vec![bd.matmul(&b)?])?,
        psi0,
        t_from: 0.0,
        t_to: 35.0,
        n_steps: 600,
    })
}

/// Five-level cavity, H = a†a, thermal collapse pair c₀ = √(κ(1+n_th))·a and
/// c₁ = √(κ·n_th)·a†, expectation a†a, ψ₀ = |1⟩ on t ∈ [0, 1].
pub fn photon() -> Result<Benchmark, LinalgError> {
    let n = PHOTON_LEVELS;
    let a = destroy(n)?;
    let ad = a.dagger();
    let num = ad.matmul(&a)?;
    let collapse = vec![
        a.scale_real((PHOTON_KAPPA * (1.0 + PHOTON_NTH)).sqrt()),
        ad.scale_real((PHOTON_KAPPA * PHOTON_NTH).sqrt()),
    ];
    Ok(Benchmark {
        kind: ProblemKind::Photon,
        ops: OperatorSet::new(num.clone(), collapse, vec![num])?,
        psi0: fock(n, 1)?,
        t_from: 0.0,
        t_to: 1.0,
        n_steps: 200,
    })
}

pub fn build_unitary() -> Result<QuantumProblem, LinalgError> {
    unitary()?.problem()
}

pub fn build_trilinear() -> Result<QuantumProblem, LinalgError> {
    trilinear()?.problem()
}

pub fn build_jcm() -> Result<QuantumProblem, LinalgError> {
    jcm()?.problem()
}

pub fn build_photon() -> Result<QuantumProblem, LinalgError> {
    photon()?.problem()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::record_expectation;

    fn c(re: f64, im: f64) -> Complex128 {
        Complex128::new(re, im)
    }

    #[test]
    fn unitary_examples() {
        let p = build_unitary().unwrap();
        let Generator::Constant(g) = &p.generator else { panic!() };
        let g = g.to_dense();
        for (i, j, want) in [(0, 0, c(-0.00125, 0.0)), (0, 1, c(0.0, -0.628_318_53)), (1, 0, c(0.0, -0.628_318_53)), (1, 1, c(-0.00125, 0.0))] {
            assert!((g.get(i, j) - want).norm() < 1e-8);
        }
        assert_eq!((p.t_from, p.t_to, p.n_steps), (0.0, 10.0, 200));
        assert_eq!(p.psi0.as_slice(), &[c(1.0, 0.0), c(0.0, 0.0)]);
    }

    #[test]
    fn trilinear_examples() {
        let b = trilinear().unwrap();
        assert_eq!(b.ops.dim(), 512);
        assert_eq!(TRILINEAR_GAMMA, [0.1, 0.1, 0.4]);
        let p = b.problem().unwrap();
        let n0 = record_expectation(&p.psi0, &p.expect[0]).unwrap();
        assert!((n0 - 3.0).abs() < 2e-2, "{n0}");
        for e in &p.expect[1..] {
            assert_eq!(record_expectation(&p.psi0, e).unwrap(), 0.0);
        }
        // Collapse prefactors √(2γ): ⟨ψ|c†c|ψ⟩ = 2γ₀⟨n₀⟩ on the initial state.
        let c0 = p.collapse[0].spmv(&p.psi0).unwrap();
        assert!((c0.norm_sq() - 0.2 * n0).abs() < 1e-12);
        assert!((b.ops.h_sys.sub(&b.ops.h_sys.dagger()).unwrap()).frobenius_norm() < 1e-12);
    }

    #[test]
    fn jcm_examples() {
        let b = jcm().unwrap();
        assert_eq!((JCM_DETUNING, JCM_COUPLING, JCM_ALPHA), (-0.1, 1.0, 4.0));
        assert_eq!(b.ops.dim(), 80);
        assert!(b.ops.collapse.is_empty());
        assert_eq!((b.t_from, b.t_to, b.n_steps), (0.0, 35.0, 600));
        let p = b.problem().unwrap();
        assert!((record_expectation(&p.psi0, &p.expect[0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn photon_examples() {
        assert!((PHOTON_KAPPA - 7.751_938_0).abs() < 1e-6);
        let b = photon().unwrap();
        let c1 = b.ops.collapse[1].get(1, 0).re;
        assert!((c1 - 0.6988).abs() < 1e-4, "{c1}");
        assert_eq!(b.psi0, fock(5, 1).unwrap());
        assert_eq!((b.t_from, b.t_to), (0.0, 1.0));
    }

    #[test]
    fn builders_are_valid_and_pure() {
        for k in ProblemKind::ALL {
            let a = k.benchmark().unwrap();
            let p = a.problem().unwrap();
            p.validate().unwrap();
            assert_eq!(a, k.benchmark().unwrap());
            assert_eq!(k.name().parse::<ProblemKind>().unwrap(), k);
            assert!((a.rho0().trace().re - 1.0).abs() < 1e-12);
        }
        assert!("bogus".parse::<ProblemKind>().is_err());
    }
}
