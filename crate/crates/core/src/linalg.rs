//! Small dense/sparse complex linear algebra used throughout the solvers.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("eigensolver did not converge for a {0}x{0} matrix")]
    EigenNoConvergence(usize),
}

/// Largest elementwise `|A - A†|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn trace(m: &CMatrix) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted ascending.
///
/// The returned matrix holds the eigenvectors as columns in the same order.
pub fn eigh(m: &CMatrix) -> Result<(Vec<f64>, CMatrix), LinalgError> {
    let n = m.nrows();
    // symmetrize to kill round-off asymmetry before handing to the solver
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or(LinalgError::EigenNoConvergence(n))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    Ok((values, vectors))
}

/// Coordinate-list sparse operator for products with small dense blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub dim: usize,
    pub entries: Vec<(usize, usize, Complex64)>,
}

impl SparseOp {
    pub fn from_dense(m: &CMatrix) -> Self {
        Self::from_dense_filtered(m, |_, _| true)
    }

    pub fn from_dense_filtered(m: &CMatrix, keep: impl Fn(usize, usize) -> bool) -> Self {
        let n = m.nrows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != Complex64::new(0.0, 0.0) && keep(i, j) {
                    entries.push((i, j, v));
                }
            }
        }
        Self { dim: n, entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `out += c · (A x)` for a row-major `dim×dim` block `x`.
    #[inline]
    pub fn left_mul_add(&self, c: Complex64, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.dim;
        for &(i, l, v) in &self.entries {
            let f = c * v;
            let src = &x[l * n..(l + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += f * s;
            }
        }
    }

    /// `out += c · (x A)` for a row-major `dim×dim` block `x`.
    #[inline]
    pub fn right_mul_add(&self, c: Complex64, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.dim;
        for &(l, j, v) in &self.entries {
            let f = c * v;
            for r in 0..n {
                out[r * n + j] += f * x[r * n + l];
            }
        }
    }
}

/// Row-major flattening of a dense matrix.
pub fn to_row_major(m: &CMatrix) -> Vec<Complex64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * m.ncols());
    for i in 0..n {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn from_row_major(n: usize, v: &[Complex64]) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| v[i * n + j])
}
