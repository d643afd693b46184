use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::SimulatedData;
use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::linalg::{cholesky_jitter, psd_factor, sym};

/// `x_t = A x_{t-1} + b + N(0, diag q)`, `y_t = C x_t + d + N(0, diag r)`, `x_0 ~ prior`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSsm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DVector<f64>,
    pub prior: GaussianDist,
}

impl LinearSsm {
    pub fn validate(&self) -> Result<()> {
        let n = self.b.len();
        let p = self.d.len();
        if self.a.shape() != (n, n) || self.q.len() != n || self.c.shape() != (p, n) || self.r.len() != p
            || self.prior.dim() != n
        {
            return Err(GpssmError::DimensionMismatch("linear system matrices".into()));
        }
        if self.q.iter().chain(self.r.iter()).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(GpssmError::InvalidParameter("noise variances must be positive".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.b.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.d.len()
    }

    pub fn simulate<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<SimulatedData> {
        self.validate()?;
        let (n, p) = (self.state_dim(), self.obs_dim());
        let mut x = self.prior.sample(rng);
        let mut latent = DMatrix::zeros(t_len, n);
        let mut obs = DMatrix::zeros(t_len, p);
        for t in 0..t_len {
            let mean = &self.a * &x + &self.b;
            x = DVector::from_fn(n, |i, _| mean[i] + self.q[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
            let y = &self.c * &x + &self.d;
            latent.set_row(t, &x.transpose());
            for i in 0..p {
                obs[(t, i)] = y[i] + self.r[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(SimulatedData { latent, observations: obs, controls: None })
    }
}

/// Exact smoothing posterior over `x_0..x_T` and the log evidence `log p(y_{1:T})`.
#[derive(Debug, Clone)]
pub struct KalmanPosterior {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `cross[t - 1] = Cov(x_{t-1}, x_t)`
    pub cross: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
}

/// Forward filter with sequential scalar updates (missing `NaN` entries
/// skipped) followed by a Rauch–Tung–Striebel backward pass.
pub fn kalman_smoother(sys: &LinearSsm, y: &DMatrix<f64>) -> Result<KalmanPosterior> {
    sys.validate()?;
    if y.ncols() != sys.obs_dim() {
        return Err(GpssmError::DimensionMismatch(format!(
            "{} observation columns for a system with {} outputs",
            y.ncols(),
            sys.obs_dim()
        )));
    }
    let t_len = y.nrows();
    let mut filt_m = vec![sys.prior.mean().clone()];
    let mut filt_p = vec![sys.prior.covariance()];
    let mut pred_m = vec![DVector::zeros(0)];
    let mut pred_p = vec![DMatrix::zeros(0, 0)];
    let mut log_evidence = 0.0;
    for t in 1..=t_len {
        let m = &sys.a * &filt_m[t - 1] + &sys.b;
        let mut p = &sys.a * &filt_p[t - 1] * sys.a.transpose();
        for i in 0..sys.state_dim() {
            p[(i, i)] += sys.q[i];
        }
        pred_m.push(m.clone());
        pred_p.push(p.clone());
        let (mut m, mut p) = (m, p);
        for i in 0..sys.obs_dim() {
            let yi = y[(t - 1, i)];
            if yi.is_nan() {
                continue;
            }
            let ci = sys.c.row(i).transpose();
            let pc = &p * &ci;
            let s = ci.dot(&pc) + sys.r[i];
            let e = yi - ci.dot(&m) - sys.d[i];
            log_evidence += -0.5 * ((2.0 * PI * s).ln() + e * e / s);
            m += &pc * (e / s);
            p = sym(&(p - &pc * pc.transpose() / s));
        }
        psd_factor(&p, "Kalman filtered covariance")?;
        filt_m.push(m);
        filt_p.push(p);
    }
    let mut means = filt_m.clone();
    let mut covs = filt_p.clone();
    let mut cross = vec![DMatrix::zeros(0, 0); t_len];
    for t in (0..t_len).rev() {
        let (ch, _) = cholesky_jitter(&pred_p[t + 1], 0.0, "Kalman predicted covariance")?;
        // G = P_t Aᵀ P_{t+1|t}⁻¹
        let g = ch.solve(&(&sys.a * &filt_p[t])).transpose();
        means[t] = &filt_m[t] + &g * (&means[t + 1] - &pred_m[t + 1]);
        covs[t] = sym(&(&filt_p[t] + &g * (&covs[t + 1] - &pred_p[t + 1]) * g.transpose()));
        cross[t] = &g * &covs[t + 1];
    }
    Ok(KalmanPosterior { means, covs, cross, log_evidence })
}
