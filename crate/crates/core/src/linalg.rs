//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpssmError, Result};

/// Largest relative jitter tried before giving up on a factorization.
const MAX_JITTER_FRACTION: f64 = 1e-2;

/// Symmetric part of a square matrix.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization, retrying with growing diagonal jitter.
///
/// `base_jitter` is absolute. On success returns the factorization together
/// with the jitter that was actually applied (0 when none was needed).
pub fn cholesky_jitter(
    m: &DMatrix<f64>,
    base_jitter: f64,
    what: &str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok((ch, 0.0));
    }
    let scale = mean_abs_diag(m).max(f64::MIN_POSITIVE);
    let mut jitter = base_jitter.max(1e-12 * scale);
    while jitter <= MAX_JITTER_FRACTION * scale {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(GpssmError::NotPositiveDefinite(what.to_string()))
}

/// Lower-triangular factor of a symmetric PSD matrix, repairing tiny
/// negative eigenvalues by jitter. Fails if the needed repair is large.
pub fn psd_factor(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(GpssmError::Numerical {
            term: what.to_string(),
            detail: "non-finite covariance".into(),
        });
    }
    let s = sym(cov);
    let (ch, _) = cholesky_jitter(&s, 1e-14 * mean_abs_diag(&s).max(1e-300), what)?;
    Ok(ch.l())
}

fn mean_abs_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
}

/// `log det(L Lᵀ)` for a lower-triangular `L` with positive diagonal.
pub fn logdet_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn lower_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

pub fn lower_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with positive diagonal")
}

/// Inverse of `L Lᵀ` from its lower factor.
pub fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = lower_solve(l, &DMatrix::identity(n, n));
    linv.transpose() * linv
}

/// Frobenius inner product `tr(Aᵀ B)`.
pub fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// True when `m` is square and strictly lower-triangular above the diagonal.
pub fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    for j in 1..m.ncols() {
        for i in 0..j {
            if m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Block-diagonal embedding of `a` (top-left) and a zero block of size `extra`.
pub fn pad_zero(a: &DMatrix<f64>, extra: usize) -> DMatrix<f64> {
    if extra == 0 {
        return a.clone();
    }
    let n = a.nrows() + extra;
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out
}
