//! Dense complex linear-algebra kernels.
//!
//! Everything downstream works on [`ComplexMatrix`], which is nalgebra's
//! column-major `DMatrix<Complex64>`. Contracts are index based, so the storage
//! order never leaks. `vec` always stacks columns, which gives
//! `vec(a * b^T) = kron(b, a)` and `vec(A X B^T) = kron(B, A) vec(X)`.

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type ComplexVector = DVector<C64>;

/// Relative tolerance used to accept a matrix as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Default ceiling on the eigenvector condition number before a general
/// eigendecomposition is reported as near-defective.
pub const DEFAULT_CONDITION_CEILING: f64 = 1e10;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("matrix is numerically singular")]
    Singular,
    #[error("eigenvector matrix is near-defective (condition {condition:.3e})")]
    NearDefective {
        condition: f64,
        decomposition: Box<EigenDecomposition>,
    },
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<C64>,
    /// Column eigenvectors, unit 2-norm.
    pub vectors: ComplexMatrix,
    pub is_hermitian_input: bool,
    /// 2-norm condition number of `vectors`.
    pub condition: f64,
}

/// Builds a matrix from row-major entries, rejecting empty shapes and
/// non-finite values.
pub fn matrix_from_rows(rows: usize, cols: usize, entries: &[C64]) -> Result<ComplexMatrix, KernelError> {
    if rows == 0 || cols == 0 {
        return Err(KernelError::Dimension(format!("empty shape {rows}x{cols}")));
    }
    if entries.len() != rows * cols {
        return Err(KernelError::Dimension(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(KernelError::Contract("non-finite entry".into()));
    }
    Ok(ComplexMatrix::from_row_slice(rows, cols, entries))
}

pub fn is_finite(m: &ComplexMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Column-stacking vectorization.
pub fn vec(m: &ComplexMatrix) -> ComplexVector {
    ComplexVector::from_column_slice(m.as_slice())
}

pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    ComplexMatrix::from_fn(ar * br, ac * bc, |row, col| {
        a[(row / br, col / bc)] * b[(row % br, col % bc)]
    })
}

/// Column-wise Kronecker product.
pub fn khatri_rao(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix, KernelError> {
    if a.ncols() != b.ncols() {
        return Err(KernelError::Dimension(format!(
            "khatri_rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let br = b.nrows();
    Ok(ComplexMatrix::from_fn(a.nrows() * br, a.ncols(), |row, col| {
        a[(row / br, col)] * b[(row % br, col)]
    }))
}

pub fn hadamard(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix, KernelError> {
    if a.shape() != b.shape() {
        return Err(KernelError::Dimension(format!(
            "hadamard of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}

/// Largest singular value over smallest; `inf` for singular input.
pub fn condition_number(m: &ComplexMatrix) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_square(m: &ComplexMatrix, what: &str) -> Result<usize, KernelError> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(KernelError::Contract(format!(
            "{what} needs a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

fn to_faer(m: &ComplexMatrix) -> Mat<C64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `X^H X`, exactly Hermitian.
pub fn gram(x: &ComplexMatrix) -> ComplexMatrix {
    let f = to_faer(x);
    let g = f.adjoint() * &f;
    let n = x.ncols();
    ComplexMatrix::from_fn(n, n, |i, j| (g[(i, j)] + g[(j, i)].conj()) * 0.5)
}

/// `X X^H`, exactly Hermitian.
pub fn outer_gram(x: &ComplexMatrix) -> ComplexMatrix {
    let f = to_faer(x);
    let g = &f * f.adjoint();
    let n = x.nrows();
    ComplexMatrix::from_fn(n, n, |i, j| (g[(i, j)] + g[(j, i)].conj()) * 0.5)
}

pub fn hermitian_defect(c: &ComplexMatrix) -> f64 {
    let scale = c.norm().max(f64::MIN_POSITIVE);
    (c - c.adjoint()).norm() / scale
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues sorted descending.
pub fn hermitian_eig(c: &ComplexMatrix) -> Result<EigenDecomposition, KernelError> {
    let n = check_square(c, "hermitian_eig")?;
    let defect = hermitian_defect(c);
    if defect > HERMITIAN_TOL {
        return Err(KernelError::Contract(format!(
            "matrix is not Hermitian (relative defect {defect:.3e})"
        )));
    }
    // Symmetrize so the solver sees an exactly Hermitian input.
    let sym = Mat::<C64>::from_fn(n, n, |i, j| (c[(i, j)] + c[(j, i)].conj()) * 0.5);
    let eig = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| KernelError::Contract(format!("Hermitian eigensolver failed: {e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].re.total_cmp(&s[i].re));
    let values = order.iter().map(|&i| C64::new(s[i].re, 0.0)).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, k| u[(r, order[k])]);
    Ok(EigenDecomposition {
        values,
        vectors,
        is_hermitian_input: true,
        condition: 1.0,
    })
}

/// General complex eigendecomposition using the default condition ceiling.
pub fn general_eig(m: &ComplexMatrix) -> Result<EigenDecomposition, KernelError> {
    general_eig_with_ceiling(m, DEFAULT_CONDITION_CEILING)
}

/// Complex Schur form followed by triangular back-substitution for the
/// eigenvectors. A near-defective result is still returned, inside the error.
pub fn general_eig_with_ceiling(m: &ComplexMatrix, ceiling: f64) -> Result<EigenDecomposition, KernelError> {
    let n = check_square(m, "general_eig")?;
    if !is_finite(m) {
        return Err(KernelError::Contract("non-finite input".into()));
    }
    let (q, t) = nalgebra::Schur::new(m.clone()).unpack();
    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();
    let tiny = f64::EPSILON * t.norm().max(f64::MIN_POSITIVE);

    let mut y = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        let lambda = values[i];
        y[(i, i)] = C64::new(1.0, 0.0);
        for j in (0..i).rev() {
            let mut acc = C64::new(0.0, 0.0);
            for l in (j + 1)..=i {
                acc += t[(j, l)] * y[(l, i)];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < tiny {
                denom = C64::new(tiny, 0.0);
            }
            y[(j, i)] = -acc / denom;
        }
    }
    let mut vectors = q * y;
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= C64::new(norm, 0.0);
        }
    }
    let condition = condition_number(&vectors);
    let decomposition = EigenDecomposition {
        values,
        vectors,
        is_hermitian_input: false,
        condition,
    };
    if condition.is_nan() || condition > ceiling {
        return Err(KernelError::NearDefective {
            condition,
            decomposition: Box::new(decomposition),
        });
    }
    Ok(decomposition)
}

/// Exact minimizer of `|W x - y|^2 + sigma_reg |x|^2`, i.e.
/// `x = (W^H W + sigma_reg I)^{-1} W^H y`.
///
/// Solved as the augmented least-squares problem `[W; sqrt(sigma) I] x = [y; 0]`
/// by QR, which avoids squaring the condition number of `W`.
pub fn ls_solve_regularized(w: &ComplexMatrix, y: &ComplexVector, sigma_reg: f64) -> Result<ComplexVector, KernelError> {
    if w.nrows() != y.len() {
        return Err(KernelError::Dimension(format!(
            "W has {} rows but y has length {}",
            w.nrows(),
            y.len()
        )));
    }
    if !sigma_reg.is_finite() || sigma_reg < 0.0 {
        return Err(KernelError::Contract(format!("sigma_reg must be finite and >= 0, got {sigma_reg}")));
    }
    let (m, n) = w.shape();
    if sigma_reg == 0.0 && m < n {
        return Err(KernelError::Singular);
    }
    let rows = if sigma_reg > 0.0 { m + n } else { m };
    let mut aug = ComplexMatrix::zeros(rows, n);
    aug.view_mut((0, 0), (m, n)).copy_from(w);
    let mut rhs = ComplexVector::zeros(rows);
    rhs.rows_mut(0, m).copy_from(y);
    if sigma_reg > 0.0 {
        let s = C64::new(sigma_reg.sqrt(), 0.0);
        for i in 0..n {
            aug[(m + i, i)] = s;
        }
    }
    let qr = aug.qr();
    let r = qr.r();
    let max_diag = (0..n).map(|i| r[(i, i)].norm()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..n).any(|i| r[(i, i)].norm() <= 1e-13 * max_diag) {
        return Err(KernelError::Singular);
    }
    let qty = qr.q().adjoint() * rhs;
    r.solve_upper_triangular(&qty).ok_or(KernelError::Singular)
}

/// Least-squares solution of `A X = B` for a full-column-rank `A`, using QR.
/// Returns `None` when `A` is rank deficient to relative tolerance `rtol`.
pub fn lstsq(a: &ComplexMatrix, b: &ComplexMatrix, rtol: f64) -> Option<ComplexMatrix> {
    let n = a.ncols();
    if a.nrows() < n || a.nrows() != b.nrows() {
        return None;
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let max_diag = (0..n).map(|i| r[(i, i)].norm()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..n).any(|i| r[(i, i)].norm() <= rtol * max_diag) {
        return None;
    }
    let qtb = qr.q().adjoint() * b;
    r.solve_upper_triangular(&qtb)
}
