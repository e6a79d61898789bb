//! Complex dense and CSR sparse linear algebra.
//!
//! Every operator in this crate is square. Dense matrices are stored row-major,
//! CSR matrices keep their column indices sorted within each row so that the
//! summation order of [`CsrMatrix::spmv`] is fixed and results are bitwise
//! reproducible.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Scalar of all state and operator arithmetic: a pair of 64-bit floats.
pub type Complex128 = num_complex::Complex64;

pub(crate) const ZERO: Complex128 = Complex128::new(0.0, 0.0);
pub(crate) const ONE: Complex128 = Complex128::new(1.0, 0.0);
pub(crate) const I: Complex128 = Complex128::new(0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("buffer of length {len} cannot hold a {n}x{n} matrix")]
    BadLength { n: usize, len: usize },
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("matrix is singular (zero pivot in column {0})")]
    Singular(usize),
    #[error("matrix exponential overflow: 1-norm {norm:e} needs {squarings} squarings")]
    ExpmOverflow { norm: f64, squarings: i32 },
    #[error("drop tolerance must be non-negative, got {0}")]
    NegativeTolerance(f64),
    #[error("malformed CSR structure: {0}")]
    MalformedCsr(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_dims(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(LinalgError::DimensionMismatch { op, left, right });
    }
    Ok(())
}

/// A complex column vector. Houses state vectors |ψ⟩.
#[derive(Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<Complex128>,
}

impl DenseVector {
    pub fn new(data: Vec<Complex128>) -> Result<Self> {
        if data.is_empty() {
            return Err(LinalgError::ZeroDimension);
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![ZERO; dim])
    }

    /// Unit vector e_k of dimension `dim`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        let mut v = Self::zeros(dim)?;
        if k >= dim {
            return Err(LinalgError::IndexOutOfRange { index: k, dim });
        }
        v.data[k] = ONE;
        Ok(v)
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&x| Complex128::new(x, 0.0)).collect())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[Complex128] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex128] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex128> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Complex128> {
        self.data.iter()
    }

    /// ⟨self|other⟩, conjugating the first argument.
    pub fn inner(&self, other: &DenseVector) -> Result<Complex128> {
        check_dims("inner", self.dim(), other.dim())?;
        Ok(inner_slices(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq_slice(&self.data)
    }

    pub fn scale(&self, c: Complex128) -> DenseVector {
        DenseVector {
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    /// Returns `self / ‖self‖`. A zero vector is returned unchanged.
    pub fn normalized(&self) -> DenseVector {
        let n = self.norm_sq().sqrt();
        if n == 0.0 {
            return self.clone();
        }
        self.scale(Complex128::new(1.0 / n, 0.0))
    }

    /// Kronecker product `self ⊗ other`.
    pub fn tensor(&self, other: &DenseVector) -> DenseVector {
        let mut data = Vec::with_capacity(self.dim() * other.dim());
        for &a in &self.data {
            data.extend(other.data.iter().map(|&b| a * b));
        }
        DenseVector { data }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite())
    }
}

impl Index<usize> for DenseVector {
    type Output = Complex128;
    fn index(&self, i: usize) -> &Complex128 {
        &self.data[i]
    }
}

impl IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut Complex128 {
        &mut self.data[i]
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

pub(crate) fn inner_slices(u: &[Complex128], v: &[Complex128]) -> Complex128 {
    u.iter().zip(v).fold(ZERO, |acc, (a, b)| acc + a.conj() * b)
}

pub(crate) fn norm_sq_slice(v: &[Complex128]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Square complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<Complex128>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(LinalgError::ZeroDimension);
        }
        Ok(Self {
            n,
            data: vec![ZERO; n * n],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n)?;
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        Ok(m)
    }

    pub fn from_row_major(n: usize, data: Vec<Complex128>) -> Result<Self> {
        if n == 0 {
            return Err(LinalgError::ZeroDimension);
        }
        if data.len() != n * n {
            return Err(LinalgError::BadLength { n, len: data.len() });
        }
        Ok(Self { n, data })
    }

    /// Builds a matrix from real row-major entries.
    pub fn from_real(n: usize, values: &[f64]) -> Result<Self> {
        Self::from_row_major(n, values.iter().map(|&x| Complex128::new(x, 0.0)).collect())
    }

    pub fn from_diagonal(diag: &[Complex128]) -> Result<Self> {
        let mut m = Self::zeros(diag.len())?;
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[Complex128] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex128 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: Complex128) {
        self.data[i * self.n + j] = value;
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> DenseMatrix {
        let n = self.n;
        let mut data = vec![ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        DenseMatrix { n, data }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dims("matmul", self.n, other.n)?;
        let n = self.n;
        let mut data = vec![ZERO; n * n];
        // i-k-j order; zero entries of the left factor are skipped, which makes
        // products of the (very sparse) ladder operators cheap.
        for i in 0..n {
            let out = &mut data[i * n..(i + 1) * n];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == ZERO {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dims("add", self.n, other.n)?;
        Ok(DenseMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_dims("sub", self.n, other.n)?;
        Ok(DenseMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, c: Complex128) -> DenseMatrix {
        DenseMatrix {
            n: self.n,
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    pub fn scale_real(&self, c: f64) -> DenseMatrix {
        self.scale(Complex128::new(c, 0.0))
    }

    /// Kronecker product `self ⊗ other`, of dimension `dim(self)·dim(other)`.
    pub fn tensor(&self, other: &DenseMatrix) -> DenseMatrix {
        let (p, q) = (self.n, other.n);
        let n = p * q;
        let mut data = vec![ZERO; n * n];
        for i1 in 0..p {
            for j1 in 0..p {
                let a = self.data[i1 * p + j1];
                if a == ZERO {
                    continue;
                }
                for i2 in 0..q {
                    let row = (i1 * q + i2) * n + j1 * q;
                    for j2 in 0..q {
                        data[row + j2] = a * other.data[i2 * q + j2];
                    }
                }
            }
        }
        DenseMatrix { n, data }
    }

    /// `a ⊗ b ⊗ c`.
    pub fn tensor3(a: &DenseMatrix, b: &DenseMatrix, c: &DenseMatrix) -> DenseMatrix {
        a.tensor(b).tensor(c)
    }

    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        check_dims("matvec", self.n, v.dim())?;
        let n = self.n;
        let data = (0..n)
            .map(|i| {
                self.data[i * n..(i + 1) * n]
                    .iter()
                    .zip(v.as_slice())
                    .fold(ZERO, |acc, (a, x)| acc + a * x)
            })
            .collect();
        Ok(DenseVector { data })
    }

    pub fn trace(&self) -> Complex128 {
        (0..self.n).map(|i| self.data[i * self.n + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm_sq_slice(&self.data).sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|j| (0..n).map(|i| self.data[i * n + j].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite())
    }

    /// Compressed-sparse-row copy dropping entries with `|value| <= drop_tol`.
    pub fn to_csr(&self, drop_tol: f64) -> Result<CsrMatrix> {
        if drop_tol.is_nan() || drop_tol < 0.0 {
            return Err(LinalgError::NegativeTolerance(drop_tol));
        }
        let n = self.n;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_ind = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = self.data[i * n + j];
                if v != ZERO && v.norm() > drop_tol {
                    col_ind.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_ind,
            values,
        })
    }

    /// LU factorisation with partial pivoting.
    pub fn lu(&self) -> Result<LuFactors> {
        LuFactors::factor(self.clone())
    }

    /// Matrix exponential by scaling and squaring with a degree-13 Padé
    /// approximant.
    pub fn expm(&self) -> Result<DenseMatrix> {
        if let Some(idx) = self.first_non_finite() {
            return Err(LinalgError::NonFinite(idx));
        }
        const THETA_13: f64 = 5.371_920_351_148_152;
        const B: [f64; 14] = [
            64_764_752_532_480_000.0,
            32_382_376_266_240_000.0,
            7_771_770_303_897_600.0,
            1_187_353_796_428_800.0,
            129_060_195_264_000.0,
            10_559_470_521_600.0,
            670_442_572_800.0,
            33_522_128_640.0,
            1_323_241_920.0,
            40_840_800.0,
            960_960.0,
            16_380.0,
            182.0,
            1.0,
        ];
        let n = self.n;
        let norm = self.norm1();
        let squarings = if norm > THETA_13 {
            (norm / THETA_13).log2().ceil() as i32
        } else {
            0
        };
        if squarings > 1000 {
            return Err(LinalgError::ExpmOverflow { norm, squarings });
        }
        let a = self.scale_real(0.5f64.powi(squarings));
        let ident = DenseMatrix::identity(n)?;
        let a2 = a.matmul(&a)?;
        let a4 = a2.matmul(&a2)?;
        let a6 = a4.matmul(&a2)?;
        let lin = |c6: f64, c4: f64, c2: f64, c0: f64| -> Result<DenseMatrix> {
            a6.scale_real(c6)
                .add(&a4.scale_real(c4))?
                .add(&a2.scale_real(c2))?
                .add(&ident.scale_real(c0))
        };
        let u_inner = a6.matmul(&lin(B[13], B[11], B[9], 0.0)?)?.add(&lin(B[7], B[5], B[3], B[1])?)?;
        let u = a.matmul(&u_inner)?;
        let v = a6.matmul(&lin(B[12], B[10], B[8], 0.0)?)?.add(&lin(B[6], B[4], B[2], B[0])?)?;
        let lu = v.sub(&u)?.lu()?;
        let mut x = lu.solve_matrix(&v.add(&u)?)?;
        for _ in 0..squarings {
            x = x.matmul(&x)?;
        }
        if x.first_non_finite().is_some() {
            return Err(LinalgError::ExpmOverflow { norm, squarings });
        }
        Ok(x)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[Complex128]> = self.data.chunks(self.n).collect();
        f.debug_struct("DenseMatrix")
            .field("n", &self.n)
            .field("rows", &rows)
            .finish()
    }
}

/// Packed LU factors of a square matrix, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<Complex128>,
    piv: Vec<usize>,
}

impl LuFactors {
    fn factor(m: DenseMatrix) -> Result<Self> {
        let n = m.n;
        let mut lu = m.data;
        let mut piv = Vec::with_capacity(n);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(LinalgError::Singular(k));
            }
            piv.push(p);
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
            }
            let inv = ONE / lu[k * n + k];
            for i in k + 1..n {
                let l = lu[i * n + k] * inv;
                lu[i * n + k] = l;
                if l == ZERO {
                    continue;
                }
                for j in k + 1..n {
                    let ukj = lu[k * n + j];
                    lu[i * n + j] -= l * ukj;
                }
            }
        }
        Ok(Self { n, lu, piv })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [Complex128]) -> Result<()> {
        let n = self.n;
        check_dims("lu solve", n, b.len())?;
        for (k, &p) in self.piv.iter().enumerate() {
            b.swap(k, p);
        }
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * b[j];
            }
            b[i] = s / self.lu[i * n + i];
        }
        Ok(())
    }

    /// Solves `A·X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.n;
        check_dims("lu solve", n, b.n)?;
        let mut out = vec![ZERO; n * n];
        let mut col = vec![ZERO; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = b.data[i * n + j];
            }
            self.solve_in_place(&mut col)?;
            for i in 0..n {
                out[i * n + j] = col[i];
            }
        }
        DenseMatrix::from_row_major(n, out)
    }
}

/// Compressed-sparse-row complex matrix.
#[derive(Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_ind: Vec<usize>,
    values: Vec<Complex128>,
}

impl CsrMatrix {
    /// Validates and assembles a CSR matrix from raw parts.
    pub fn from_parts(
        n: usize,
        row_ptr: Vec<usize>,
        col_ind: Vec<usize>,
        values: Vec<Complex128>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(LinalgError::ZeroDimension);
        }
        let bad = |s: &str| Err(LinalgError::MalformedCsr(s.to_string()));
        if row_ptr.len() != n + 1 || row_ptr[0] != 0 {
            return bad("row_ptr must have n+1 entries starting at 0");
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_ptr must be non-decreasing");
        }
        if col_ind.len() != values.len() || row_ptr[n] != values.len() {
            return bad("row_ptr[n], col_ind and values lengths disagree");
        }
        for i in 0..n {
            let cols = &col_ind[row_ptr[i]..row_ptr[i + 1]];
            if cols.iter().any(|&c| c >= n) {
                return bad("column index out of range");
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad("column indices must be strictly increasing within a row");
            }
        }
        if values.iter().any(|&v| v == ZERO) {
            return bad("explicitly stored zero");
        }
        Ok(Self {
            n,
            row_ptr,
            col_ind,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_ind(&self) -> &[usize] {
        &self.col_ind
    }

    pub fn values(&self) -> &[Complex128] {
        &self.values
    }

    /// Iterates the stored `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex128)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_ind[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.n;
        let mut data = vec![ZERO; n * n];
        for i in 0..n {
            for (j, v) in self.row(i) {
                data[i * n + j] = v;
            }
        }
        DenseMatrix { n, data }
    }

    pub fn dagger(&self) -> CsrMatrix {
        // Row-major traversal emits each transposed row in ascending column order.
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for &c in &self.col_ind {
            counts[c + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_ind = vec![0; self.nnz()];
        let mut values = vec![ZERO; self.nnz()];
        for i in 0..n {
            for (j, v) in self.row(i) {
                let dst = next[j];
                col_ind[dst] = i;
                values[dst] = v.conj();
                next[j] += 1;
            }
        }
        CsrMatrix {
            n,
            row_ptr,
            col_ind,
            values,
        }
    }

    /// `y = M·v`.
    pub fn spmv(&self, v: &DenseVector) -> Result<DenseVector> {
        check_dims("spmv", self.n, v.dim())?;
        let mut out = vec![ZERO; self.n];
        self.spmv_into(v.as_slice(), &mut out);
        Ok(DenseVector { data: out })
    }

    /// Hot-path product writing into `out`. Both slices must have length `dim`.
    pub fn spmv_into(&self, v: &[Complex128], out: &mut [Complex128]) {
        assert_eq!(v.len(), self.n, "spmv input dimension");
        assert_eq!(out.len(), self.n, "spmv output dimension");
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * v[self.col_ind[k]];
            }
            *o = acc;
        }
    }

    /// ⟨v|M|v⟩ without allocating.
    pub fn quadratic_form(&self, v: &[Complex128]) -> Complex128 {
        assert_eq!(v.len(), self.n, "quadratic form dimension");
        let mut acc = ZERO;
        for (i, vi) in v.iter().enumerate() {
            let mut row = ZERO;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.values[k] * v[self.col_ind[k]];
            }
            acc += vi.conj() * row;
        }
        acc
    }

    /// `out += M·A` for dense `A` (row-major slices of length n²).
    pub(crate) fn mul_dense_acc(&self, a: &[Complex128], out: &mut [Complex128]) {
        let n = self.n;
        for i in 0..n {
            let dst = &mut out[i * n..(i + 1) * n];
            for (k, v) in self.row(i) {
                for (o, &x) in dst.iter_mut().zip(&a[k * n..(k + 1) * n]) {
                    *o += v * x;
                }
            }
        }
    }

    /// `out += A·M` for dense `A`, scaled by `c`.
    pub(crate) fn dense_mul_acc(&self, a: &[Complex128], c: Complex128, out: &mut [Complex128]) {
        let n = self.n;
        for i in 0..n {
            let arow = &a[i * n..(i + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == ZERO {
                    continue;
                }
                let s = c * aik;
                for (j, v) in self.row(k) {
                    dst[j] += s * v;
                }
            }
        }
    }
}

impl fmt::Debug for CsrMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CsrMatrix")
            .field("n", &self.n)
            .field("row_ptr", &self.row_ptr)
            .field("col_ind", &self.col_ind)
            .field("values", &self.values)
            .finish()
    }
}
