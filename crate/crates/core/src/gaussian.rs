//! Multivariate Gaussian distributions carried by their Cholesky factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpssmError, Result};
use crate::linalg::{is_lower_triangular, logdet_from_factor, lower_solve, lower_solve_vec, psd_factor};

/// Smallest admissible diagonal entry of a covariance factor.
pub const MIN_FACTOR_DIAG: f64 = 1e-8;

/// A Gaussian `N(mean, L Lᵀ)` with lower-triangular `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGaussian {
    #[serde(with = "crate::serde_mat::vec")]
    mean: DVector<f64>,
    #[serde(with = "crate::serde_mat::mat")]
    cov_factor: DMatrix<f64>,
}

impl TryFrom<RawGaussian> for GaussianDist {
    type Error = GpssmError;
    fn try_from(r: RawGaussian) -> Result<Self> {
        GaussianDist::new(r.mean, r.cov_factor)
    }
}

impl From<GaussianDist> for RawGaussian {
    fn from(g: GaussianDist) -> Self {
        RawGaussian { mean: g.mean, cov_factor: g.cov_factor }
    }
}

/// Checks a lower-triangular factor; with `clamp` small diagonal entries are
/// raised to [`MIN_FACTOR_DIAG`] instead of rejected.
pub(crate) fn validate_factor(factor: &mut DMatrix<f64>, clamp: bool) -> Result<()> {
    if !is_lower_triangular(factor) {
        return Err(GpssmError::InvalidParameter(
            "covariance factor must be square lower-triangular".into(),
        ));
    }
    if factor.iter().any(|v| !v.is_finite()) {
        return Err(GpssmError::InvalidParameter("non-finite covariance factor".into()));
    }
    for i in 0..factor.nrows() {
        let v = factor[(i, i)];
        if v < MIN_FACTOR_DIAG {
            if clamp && v >= 0.0 {
                factor[(i, i)] = MIN_FACTOR_DIAG;
            } else if clamp {
                // negative diagonal: flip the column sign, the covariance is unchanged
                for r in i..factor.nrows() {
                    factor[(r, i)] = -factor[(r, i)];
                }
                factor[(i, i)] = factor[(i, i)].max(MIN_FACTOR_DIAG);
            } else {
                return Err(GpssmError::DegenerateFactor { value: v, floor: MIN_FACTOR_DIAG });
            }
        }
    }
    Ok(())
}

impl GaussianDist {
    /// Builds a Gaussian from a mean and a lower-triangular covariance factor.
    pub fn new(mean: DVector<f64>, mut cov_factor: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov_factor.nrows() {
            return Err(GpssmError::DimensionMismatch(format!(
                "mean has {} entries, factor has {} rows",
                mean.len(),
                cov_factor.nrows()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GpssmError::InvalidParameter("non-finite mean".into()));
        }
        validate_factor(&mut cov_factor, false)?;
        Ok(Self { mean, cov_factor })
    }

    /// Like [`GaussianDist::new`] but clamps tiny diagonal entries.
    pub fn new_clamped(mean: DVector<f64>, mut cov_factor: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov_factor.nrows() {
            return Err(GpssmError::DimensionMismatch(format!(
                "mean has {} entries, factor has {} rows",
                mean.len(),
                cov_factor.nrows()
            )));
        }
        validate_factor(&mut cov_factor, true)?;
        Ok(Self { mean, cov_factor })
    }

    /// Factorizes a covariance matrix (with a small PSD repair if needed).
    pub fn from_covariance(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let l = psd_factor(cov, "gaussian covariance")?;
        Self::new_clamped(mean, l)
    }

    /// Isotropic Gaussian `N(mean, variance·I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * variance.sqrt())
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), cov_factor: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    pub fn log_det_cov(&self) -> f64 {
        logdet_from_factor(&self.cov_factor)
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (2.0 * PI * std::f64::consts::E).ln() + 0.5 * self.log_det_cov()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let z = lower_solve_vec(&self.cov_factor, &(x - &self.mean));
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det_cov() + z.norm_squared())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.cov_factor * eps
    }
}

/// `KL(a ‖ b)` between two Gaussians.
pub fn gaussian_kl(a: &GaussianDist, b: &GaussianDist) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(GpssmError::DimensionMismatch(format!(
            "KL between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    let m = lower_solve(&b.cov_factor, &a.cov_factor);
    let diff = lower_solve_vec(&b.cov_factor, &(&b.mean - &a.mean));
    let kl = 0.5
        * (m.norm_squared() + diff.norm_squared() - a.dim() as f64 + b.log_det_cov()
            - a.log_det_cov());
    Ok(kl.max(0.0))
}
