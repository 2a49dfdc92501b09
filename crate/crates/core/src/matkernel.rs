//! Dense complex small-matrix kernel.
//!
//! Every matrix in the simulator (channels, analog and digital beamformers,
//! effective channels, noise covariances) is a [`ComplexMatrix`]. The
//! factorizations are backed by `nalgebra`; this module adds the validation,
//! the reproducible SVD phase convention and the fail-loudly inverse square
//! root that the rest of the crate relies on.

use std::ops::{Add, Deref, Mul, Sub};

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{HbfError, Result};

pub type C64 = Complex<f64>;

/// Iteration cap for the SVD and Hermitian eigensolvers.
pub const MAX_ITERATIONS: usize = 1000;

/// Relative eigenvalue floor below which a Gram matrix is rejected.
pub const GRAM_CONDITION_FLOOR: f64 = 1e-10;

/// Tolerance used when checking that an input is Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// A finite, non-empty dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix(DMatrix<C64>);

impl ComplexMatrix {
    /// Builds a matrix from entries listed in row-major order.
    pub fn new(rows: usize, cols: usize, row_major: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(HbfError::InvalidArgument(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if row_major.len() != rows * cols {
            return Err(HbfError::DimensionMismatch {
                op: "ComplexMatrix::new",
                detail: format!("{} entries for a {rows}x{cols} matrix", row_major.len()),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, &row_major))
    }

    pub fn from_dmatrix(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(HbfError::InvalidArgument(format!(
                "matrix must be non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let z = m[(r, c)];
                if !z.re.is_finite() || !z.im.is_finite() {
                    return Err(HbfError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(ComplexMatrix(m))
    }

    /// Wraps a matrix computed from already-validated operands.
    pub(crate) fn from_dmatrix_unchecked(m: DMatrix<C64>) -> Self {
        debug_assert!(m.nrows() > 0 && m.ncols() > 0);
        ComplexMatrix(m)
    }

    pub fn identity(n: usize) -> Self {
        ComplexMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let v = DVector::from_iterator(diag.len(), diag.iter().map(|&d| C64::new(d, 0.0)));
        ComplexMatrix(DMatrix::from_diagonal(&v))
    }

    /// Stacks equal-length column vectors side by side.
    pub fn from_columns(columns: &[DVector<C64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(HbfError::InvalidArgument("no columns given".into()));
        }
        let rows = columns[0].len();
        if columns.iter().any(|c| c.len() != rows) {
            return Err(HbfError::DimensionMismatch {
                op: "ComplexMatrix::from_columns",
                detail: "columns differ in length".into(),
            });
        }
        Self::from_dmatrix(DMatrix::from_columns(columns))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<C64> {
        self.0
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        ComplexMatrix(self.0.adjoint())
    }

    pub fn matmul(&self, rhs: &ComplexMatrix) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(HbfError::DimensionMismatch {
                op: "matmul",
                detail: format!(
                    "{}x{} times {}x{}",
                    self.rows(),
                    self.cols(),
                    rhs.rows(),
                    rhs.cols()
                ),
            });
        }
        Ok(ComplexMatrix(&self.0 * &rhs.0))
    }

    /// Selects columns by index, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(HbfError::InvalidArgument("empty column selection".into()));
        }
        for &i in indices {
            if i >= self.cols() {
                return Err(HbfError::IndexOutOfRange {
                    what: "matrix column",
                    index: i,
                    len: self.cols(),
                });
            }
        }
        Ok(ComplexMatrix(self.0.select_columns(indices)))
    }

    /// Leading `n` columns.
    pub fn leading_columns(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.cols() {
            return Err(HbfError::InvalidArgument(format!(
                "cannot take {n} leading columns of a {}-column matrix",
                self.cols()
            )));
        }
        Ok(ComplexMatrix(self.0.columns(0, n).into_owned()))
    }

    pub fn scale(&self, s: f64) -> Self {
        ComplexMatrix(self.0.map(|z| z * s))
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    /// Largest elementwise deviation from the conjugate transpose.
    pub fn hermitian_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows();
        let mut worst = 0.0_f64;
        for r in 0..n {
            for c in r..n {
                worst = worst.max((self.0[(r, c)] - self.0[(c, r)].conj()).norm());
            }
        }
        worst
    }

    /// Largest elementwise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }
}

impl Deref for ComplexMatrix {
    type Target = DMatrix<C64>;

    fn deref(&self) -> &DMatrix<C64> {
        &self.0
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;

    /// Panics on a dimension mismatch; use [`ComplexMatrix::matmul`] for a
    /// fallible product.
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        ComplexMatrix(&self.0 * &rhs.0)
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        ComplexMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;

    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        ComplexMatrix(&self.0 - &rhs.0)
    }
}

/// Thin singular value decomposition `a = left · diag(singular_values) · right^H`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub left: ComplexMatrix,
    pub singular_values: Vec<f64>,
    pub right: ComplexMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let s = ComplexMatrix::from_real_diagonal(&self.singular_values);
        &(&self.left * &s) * &self.right.adjoint()
    }
}

/// Thin SVD with descending singular values.
///
/// Each left singular vector is rotated so that its largest-magnitude entry
/// (first one on ties) is real and positive, and the matching right vector
/// gets the same rotation.
pub fn svd(a: &ComplexMatrix) -> Result<SvdResult> {
    let (rows, cols) = a.shape();
    let raw = a
        .as_dmatrix()
        .clone()
        .try_svd(true, true, f64::EPSILON, MAX_ITERATIONS)
        .ok_or(HbfError::SvdNoConvergence { rows, cols })?;
    let (u, v_t) = match (raw.u, raw.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(HbfError::SvdNoConvergence { rows, cols }),
    };
    let v = v_t.adjoint();
    let p = raw.singular_values.len();

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| raw.singular_values[j].total_cmp(&raw.singular_values[i]));

    let mut left = DMatrix::<C64>::zeros(rows, p);
    let mut right = DMatrix::<C64>::zeros(cols, p);
    let mut sv = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        sv.push(raw.singular_values[src].max(0.0));
        let ucol = u.column(src);
        let mut pivot = 0;
        let mut best = -1.0;
        for (r, z) in ucol.iter().enumerate() {
            let m = z.norm();
            if m > best {
                best = m;
                pivot = r;
            }
        }
        let phase = if best > 0.0 {
            ucol[pivot].conj() / best
        } else {
            C64::new(1.0, 0.0)
        };
        left.set_column(dst, &(ucol * phase));
        right.set_column(dst, &(v.column(src) * phase));
    }
    Ok(SvdResult {
        left: ComplexMatrix(left),
        singular_values: sv,
        right: ComplexMatrix(right),
    })
}

fn hermitian_eigen(a: &ComplexMatrix) -> Result<SymmetricEigen<C64, nalgebra::Dyn>> {
    if !a.is_square() {
        return Err(HbfError::DimensionMismatch {
            op: "hermitian eigendecomposition",
            detail: format!("{}x{} is not square", a.rows(), a.cols()),
        });
    }
    let scale = a.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let defect = a.hermitian_defect();
    if defect > HERMITIAN_TOL * scale {
        return Err(HbfError::InvalidArgument(format!(
            "matrix is not Hermitian (defect {defect:e})"
        )));
    }
    SymmetricEigen::try_new(a.as_dmatrix().clone(), f64::EPSILON, MAX_ITERATIONS)
        .ok_or(HbfError::EigenNoConvergence { dim: a.rows() })
}

/// `Q · diag(λ^power) · Q^H` for a Hermitian positive-definite input.
///
/// No clamping: an eigenvalue at or below `GRAM_CONDITION_FLOOR · λ_max`
/// is reported as an ill-conditioned Gram error.
fn hermitian_pd_power(a: &ComplexMatrix, power: f64) -> Result<ComplexMatrix> {
    let eig = hermitian_eigen(a)?;
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_eig > 0.0) || min_eig <= GRAM_CONDITION_FLOOR * max_eig {
        return Err(HbfError::IllConditionedGram {
            context: "unnamed".into(),
            min_eig,
            max_eig,
        });
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let f = lambda.powf(power);
        scaled.column_mut(j).scale_mut(f);
    }
    let mut out = &scaled * q.adjoint();
    // Symmetrize away rounding so the result is exactly Hermitian.
    let n = out.nrows();
    for r in 0..n {
        out[(r, r)].im = 0.0;
        for c in (r + 1)..n {
            let avg = (out[(r, c)] + out[(c, r)].conj()) * 0.5;
            out[(r, c)] = avg;
            out[(c, r)] = avg.conj();
        }
    }
    Ok(ComplexMatrix(out))
}

/// Inverse square root of a Hermitian positive-definite matrix.
pub fn inv_sqrt_hermitian(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    hermitian_pd_power(a, -0.5)
}

/// Inverse of a Hermitian positive-definite matrix, with the same
/// conditioning check as [`inv_sqrt_hermitian`].
pub fn inv_hermitian(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    hermitian_pd_power(a, -1.0)
}

/// Eigenvalues of a Hermitian matrix, descending.
pub fn hermitian_eigenvalues(a: &ComplexMatrix) -> Result<Vec<f64>> {
    let eig = hermitian_eigen(a)?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

pub fn frobenius_sq(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn det_abs_sq(a: &ComplexMatrix) -> Result<f64> {
    if !a.is_square() {
        return Err(HbfError::DimensionMismatch {
            op: "det_abs_sq",
            detail: format!("{}x{} is not square", a.rows(), a.cols()),
        });
    }
    Ok(a.as_dmatrix().clone().determinant().norm_sqr())
}

pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    ComplexMatrix(a.as_dmatrix().kronecker(b.as_dmatrix()))
}

/// Squared singular values in descending order.
///
/// Closed form for 1x1 and 2x2 inputs (the effective-channel sizes that
/// dominate beam selection), SVD otherwise.
pub fn squared_singular_values(a: &DMatrix<C64>) -> Result<Vec<f64>> {
    match a.shape() {
        (1, 1) => Ok(vec![a[(0, 0)].norm_sqr()]),
        (2, 2) => Ok(squared_singular_values_2x2(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]).to_vec()),
        _ => {
            let m = ComplexMatrix::from_dmatrix(a.clone())?;
            Ok(svd(&m)?.singular_values.iter().map(|s| s * s).collect())
        }
    }
}

/// Eigenvalues of `a·a^H` (equivalently the squared singular values of
/// `a`), descending, from the smaller of the two Gram matrices.
pub fn gram_eigenvalues(a: &DMatrix<C64>) -> Vec<f64> {
    let g = if a.nrows() <= a.ncols() {
        a * a.adjoint()
    } else {
        a.adjoint() * a
    };
    let mut ev: Vec<f64> = g.symmetric_eigenvalues().iter().map(|&x| x.max(0.0)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Squared singular values of `[[a00, a01], [a10, a11]]`, descending.
#[inline]
pub fn squared_singular_values_2x2(a00: C64, a01: C64, a10: C64, a11: C64) -> [f64; 2] {
    // Eigenvalues of the Gram matrix a^H a = [[p, q], [q*, r]].
    let p = a00.norm_sqr() + a10.norm_sqr();
    let r = a01.norm_sqr() + a11.norm_sqr();
    let q = a00.conj() * a01 + a10.conj() * a11;
    let half_trace = 0.5 * (p + r);
    // The product of the eigenvalues is |det a|^2; using it for the smaller
    // one avoids cancellation.
    let det_sq = (a00 * a11 - a01 * a10).norm_sqr();
    let disc = (0.25 * (p - r) * (p - r) + q.norm_sqr()).sqrt();
    let big = half_trace + disc;
    let small = if big > 0.0 { det_sq / big } else { 0.0 };
    [big, small]
}

/// `log2 det(a)` for a Hermitian positive-definite `a` via Cholesky;
/// `None` when the factorization fails.
pub fn log2_det_hermitian_pd(a: &DMatrix<C64>) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        let d = l[(i, i)].re;
        if !(d > 0.0) {
            return None;
        }
        acc += 2.0 * d.log2();
    }
    Some(acc)
}
