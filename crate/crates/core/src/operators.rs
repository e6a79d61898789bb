//! Quantum-optics operator constructors, the effective generator of the
//! no-jump evolution, and the Lindblad right-hand side used by the dense
//! reference solver.
//!
//! Conventions: ħ = 1, basis index 0 is the ground state |0⟩ and σ⁻ maps
//! index 1 to index 0.

use crate::linalg::{Complex128, CsrMatrix, DenseMatrix, DenseVector, LinalgError, Result, I, ONE, ZERO};

/// Bosonic annihilation operator truncated to `n` levels: a|k⟩ = √k|k−1⟩.
pub fn destroy(n: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(n)?;
    for k in 1..n {
        m.set(k - 1, k, Complex128::new((k as f64).sqrt(), 0.0));
    }
    Ok(m)
}

pub fn eye(n: usize) -> Result<DenseMatrix> {
    DenseMatrix::identity(n)
}

pub fn sigma_x() -> DenseMatrix {
    DenseMatrix::from_real(2, &[0.0, 1.0, 1.0, 0.0]).expect("2x2")
}

pub fn sigma_z() -> DenseMatrix {
    DenseMatrix::from_real(2, &[1.0, 0.0, 0.0, -1.0]).expect("2x2")
}

/// Spin lowering operator, |1⟩ ↦ |0⟩.
pub fn sigma_minus() -> DenseMatrix {
    DenseMatrix::from_real(2, &[0.0, 1.0, 0.0, 0.0]).expect("2x2")
}

pub fn sigma_plus() -> DenseMatrix {
    sigma_minus().dagger()
}

/// Number state |k⟩ in an `n`-level space.
pub fn fock(n: usize, k: usize) -> Result<DenseVector> {
    DenseVector::basis(n, k)
}

/// Coherent state D(α)|0⟩ with the displacement D = exp(α a† − α* a) taken on
/// the truncated `n`-level space. The result is unit norm up to roundoff; the
/// truncation shows up as distorted amplitudes near the top levels.
pub fn coherent(n: usize, alpha: Complex128) -> Result<DenseVector> {
    if n < 2 {
        return Err(LinalgError::ZeroDimension);
    }
    let a = destroy(n)?;
    let gen = a.dagger().scale(alpha).sub(&a.scale(alpha.conj()))?;
    gen.expm()?.matvec(&fock(n, 0)?)
}

/// System Hamiltonian with its collapse and expectation operators.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSet {
    pub h_sys: DenseMatrix,
    pub collapse: Vec<DenseMatrix>,
    pub expect: Vec<DenseMatrix>,
}

impl OperatorSet {
    pub fn new(h_sys: DenseMatrix, collapse: Vec<DenseMatrix>, expect: Vec<DenseMatrix>) -> Result<Self> {
        let n = h_sys.dim();
        for m in collapse.iter().chain(&expect) {
            if m.dim() != n {
                return Err(LinalgError::DimensionMismatch {
                    op: "operator set",
                    left: n,
                    right: m.dim(),
                });
            }
        }
        Ok(Self { h_sys, collapse, expect })
    }

    pub fn dim(&self) -> usize {
        self.h_sys.dim()
    }

    /// Σₙ C†ₙCₙ.
    pub fn decay_sum(&self) -> Result<DenseMatrix> {
        let mut k = DenseMatrix::zeros(self.dim())?;
        for c in &self.collapse {
            k = k.add(&c.dagger().matmul(c)?)?;
        }
        Ok(k)
    }
}

/// G = −i·H_eff stored as CSR, so the no-jump evolution is dψ/dt = G·ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGenerator {
    pub g: CsrMatrix,
}

impl EffectiveGenerator {
    pub fn dim(&self) -> usize {
        self.g.dim()
    }
}

/// G = −i(H − (i/2)ΣC†C) = −iH − ½ΣC†C.
pub fn effective_generator(ops: &OperatorSet) -> Result<EffectiveGenerator> {
    let g = ops
        .h_sys
        .scale(-I)
        .add(&ops.decay_sum()?.scale_real(-0.5))?;
    Ok(EffectiveGenerator { g: g.to_csr(0.0)? })
}

/// dρ/dt = −i[H,ρ] + Σₙ ½(2CₙρC†ₙ − ρC†ₙCₙ − C†ₙCₙρ), evaluated densely.
pub fn lindblad_rhs(ops: &OperatorSet, rho: &DenseMatrix) -> Result<DenseMatrix> {
    let h = &ops.h_sys;
    let mut out = h.matmul(rho)?.sub(&rho.matmul(h)?)?.scale(-I);
    for c in &ops.collapse {
        let cd = c.dagger();
        let cdc = cd.matmul(c)?;
        let jump = c.matmul(rho)?.matmul(&cd)?.scale_real(2.0);
        let anti = rho.matmul(&cdc)?.add(&cdc.matmul(rho)?)?;
        out = out.add(&jump.sub(&anti)?.scale_real(0.5))?;
    }
    Ok(out)
}

/// Sparse form of [`lindblad_rhs`] for repeated evaluation on a flattened ρ:
/// dρ/dt = G·ρ + ρ·G† + Σₙ CₙρC†ₙ with G the effective generator.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    n: usize,
    g: CsrMatrix,
    g_dag: CsrMatrix,
    collapse: Vec<(CsrMatrix, CsrMatrix)>,
}

impl LindbladGenerator {
    pub fn new(ops: &OperatorSet) -> Result<Self> {
        let g = effective_generator(ops)?.g;
        let collapse = ops
            .collapse
            .iter()
            .map(|c| {
                let csr = c.to_csr(0.0)?;
                let dag = csr.dagger();
                Ok((csr, dag))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n: ops.dim(),
            g_dag: g.dagger(),
            g,
            collapse,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Writes dρ/dt into `out`; both slices hold ρ row-major (length n²).
    pub fn apply(&self, rho: &[Complex128], out: &mut [Complex128], scratch: &mut Vec<Complex128>) {
        let nn = self.n * self.n;
        assert_eq!(rho.len(), nn);
        assert_eq!(out.len(), nn);
        out.iter_mut().for_each(|x| *x = ZERO);
        self.g.mul_dense_acc(rho, out);
        self.g_dag.dense_mul_acc(rho, ONE, out);
        scratch.clear();
        scratch.resize(nn, ZERO);
        for (c, c_dag) in &self.collapse {
            scratch.iter_mut().for_each(|x| *x = ZERO);
            c_dag.dense_mul_acc(rho, ONE, scratch);
            c.mul_dense_acc(scratch, out);
        }
    }
}
