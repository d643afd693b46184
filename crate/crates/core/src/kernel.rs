//! ARD squared-exponential kernel and its expectations under Gaussian inputs.
//!
//! With `Λ = diag(ℓ²)` the kernel is `k(x, x') = σ² exp(-½ (x - x')ᵀ Λ⁻¹ (x - x'))`.
//! For `x ~ N(μ, S)` all of the following have closed forms:
//!
//! * `ψ0 = E[k(x, x)] = σ²`
//! * `ψ1_m = E[k(x, z_m)] = σ² |Λ|^½ |Λ + S|^-½ exp(-½ rᵀ (Λ + S)⁻¹ r)`, `r = z_m - μ`
//! * `Ψ2_mm' = E[k(x, z_m) k(x, z_m')]`, a Gaussian integral centred at `(z_m + z_m')/2`
//! * `E[x k(x, z_m)] = ψ1_m (μ + S (Λ + S)⁻¹ (z_m - μ))`
//!
//! The last identity extends to any `y` jointly Gaussian with `x`, which is how
//! the cross statistic `E[x_t k(x_{t-1}, z_m)]` is formed without inverting `S`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::linalg::{logdet_from_factor, psd_factor};
use crate::markov::PairMoments;

/// Relative jitter added to `K_zz` (scaled by the signal variance).
pub const GRAM_JITTER: f64 = 1e-6;

/// Squared-exponential kernel with one lengthscale per input dimension.
///
/// Parameters are stored as logarithms so that optimizers work unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel", into = "RawKernel")]
pub struct ArdRbfKernel {
    log_variance: f64,
    log_lengthscales: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawKernel {
    log_signal_variance: f64,
    log_lengthscales: Vec<f64>,
}

impl TryFrom<RawKernel> for ArdRbfKernel {
    type Error = GpssmError;
    fn try_from(r: RawKernel) -> Result<Self> {
        let k = ArdRbfKernel::from_log(r.log_signal_variance, DVector::from_vec(r.log_lengthscales));
        ArdRbfKernel::new(k.variance(), k.lengthscales())?;
        Ok(k)
    }
}

impl From<ArdRbfKernel> for RawKernel {
    fn from(k: ArdRbfKernel) -> Self {
        RawKernel {
            log_signal_variance: k.log_variance,
            log_lengthscales: k.log_lengthscales.iter().copied().collect(),
        }
    }
}

impl ArdRbfKernel {
    pub fn new(signal_variance: f64, lengthscales: DVector<f64>) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(GpssmError::InvalidParameter(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(GpssmError::InvalidParameter(
                "lengthscales must be positive and finite".into(),
            ));
        }
        Ok(Self {
            log_variance: signal_variance.ln(),
            log_lengthscales: lengthscales.map(f64::ln),
        })
    }

    pub fn from_log(log_variance: f64, log_lengthscales: DVector<f64>) -> Self {
        Self { log_variance, log_lengthscales }
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn log_variance(&self) -> f64 {
        self.log_variance
    }

    pub fn log_lengthscales(&self) -> &DVector<f64> {
        &self.log_lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }

    /// Squared lengthscales, the diagonal of `Λ`.
    pub(crate) fn lambda(&self) -> DVector<f64> {
        self.log_lengthscales.map(|l| (2.0 * l).exp())
    }

    fn check_dim(&self, n: usize, what: &str) -> Result<()> {
        if n != self.input_dim() {
            return Err(GpssmError::DimensionMismatch(format!(
                "{what} has dimension {n}, kernel expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.check_dim(x.len(), "x")?;
        self.check_dim(y.len(), "x'")?;
        let lam = self.lambda();
        let q: f64 = (0..x.len()).map(|i| (x[i] - y[i]).powi(2) / lam[i]).sum();
        Ok(self.variance() * (-0.5 * q).exp())
    }

    /// Cross-covariance between the rows of `x` (N×D) and the rows of `z` (M×D).
    pub fn gram(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols(), "x")?;
        self.check_dim(z.ncols(), "z")?;
        Ok(self.gram_unchecked(x, z))
    }

    pub(crate) fn gram_unchecked(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        let lam = self.lambda();
        let var = self.variance();
        DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
            let q: f64 = (0..lam.len()).map(|d| (x[(i, d)] - z[(j, d)]).powi(2) / lam[d]).sum();
            var * (-0.5 * q).exp()
        })
    }

    /// `K_zz` plus the standard jitter.
    pub fn gram_jittered(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = self.gram_unchecked(z, z);
        let j = GRAM_JITTER * self.variance();
        for i in 0..k.nrows() {
            k[(i, i)] += j;
        }
        k
    }

    /// Kernel evaluations between one point and every row of `z`.
    pub(crate) fn kvec(&self, x: &DVector<f64>, z: &DMatrix<f64>) -> DVector<f64> {
        let lam = self.lambda();
        let var = self.variance();
        DVector::from_fn(z.nrows(), |m, _| {
            let q: f64 = (0..lam.len()).map(|d| (x[d] - z[(m, d)]).powi(2) / lam[d]).sum();
            var * (-0.5 * q).exp()
        })
    }

    pub fn psi0(&self, _q_in: &GaussianDist) -> f64 {
        self.variance()
    }

    pub fn psi1(&self, q_in: &GaussianDist, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(q_in.dim(), "input")?;
        self.check_dim(z.ncols(), "z")?;
        Ok(psi1_forward(self, q_in.mean(), &q_in.covariance(), z)?.psi1)
    }

    pub fn psi2(&self, q_in: &GaussianDist, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(q_in.dim(), "input")?;
        self.check_dim(z.ncols(), "z")?;
        psi2_cross_kernels(self, self, q_in.mean(), &q_in.covariance(), z)
    }

    /// `E[x_t k(x_{t-1}, z_m)]` for every inducing input, as a `D×M` matrix.
    pub fn psi1_cross(&self, pair: &PairMoments, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(pair.mean_prev.len(), "previous state")?;
        self.check_dim(z.ncols(), "z")?;
        pair.joint_factor()?;
        let p1 = psi1_forward(self, &pair.mean_prev, &pair.cov_prev, z)?;
        // column m: ψ1_m (m_next + Vᵀ B r_m)
        let proj = &p1.rb * &pair.cross_cov; // M×D, row m = (B r_m)ᵀ V
        let mut out = DMatrix::zeros(pair.mean_next.len(), z.nrows());
        for m in 0..z.nrows() {
            for d in 0..pair.mean_next.len() {
                out[(d, m)] = p1.psi1[m] * (pair.mean_next[d] + proj[(m, d)]);
            }
        }
        Ok(out)
    }
}

/// Forward quantities of ψ1 reused by the reverse pass.
pub(crate) struct Psi1Parts {
    pub psi1: DVector<f64>,
    /// Row `m` is `(B (z_m - μ))ᵀ` with `B = (Λ + S)⁻¹`.
    pub rb: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub(crate) fn psi1_forward(
    k: &ArdRbfKernel,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<Psi1Parts> {
    let lam = k.lambda();
    let mut x = cov.clone();
    for i in 0..lam.len() {
        x[(i, i)] += lam[i];
    }
    let l = psd_factor(&x, "psi1 (Λ + S)")?;
    let b = crate::linalg::inverse_from_factor(&l);
    let log_scale = k.log_variance
        + 0.5 * lam.iter().map(|v| v.ln()).sum::<f64>()
        - 0.5 * logdet_from_factor(&l);
    let m = z.nrows();
    let r = DMatrix::from_fn(m, mean.len(), |i, j| z[(i, j)] - mean[j]);
    let rb = &r * &b;
    let psi1 = DVector::from_fn(m, |i, _| {
        let q = r.row(i).dot(&rb.row(i));
        (log_scale - 0.5 * q).exp()
    });
    Ok(Psi1Parts { psi1, rb, b })
}

/// Gradient accumulator for one kernel and one Gaussian input.
#[derive(Debug, Clone)]
pub(crate) struct PsiGrads {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_var: f64,
    /// Gradient with respect to the diagonal of `Λ`; converted by [`PsiGrads::log_lengthscales`].
    pub lam: DVector<f64>,
    pub z: DMatrix<f64>,
}

impl PsiGrads {
    pub fn zeros(dim: usize, m: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
            log_var: 0.0,
            lam: DVector::zeros(dim),
            z: DMatrix::zeros(m, dim),
        }
    }

    pub fn log_lengthscales(&self, k: &ArdRbfKernel) -> DVector<f64> {
        self.lam.component_mul(&k.lambda()) * 2.0
    }
}

/// Reverse pass of ψ1 given `∂L/∂ψ1`.
pub(crate) fn psi1_backward(
    parts: &Psi1Parts,
    g_psi1: &DVector<f64>,
    lam: &DVector<f64>,
    out: &mut PsiGrads,
) {
    let e = g_psi1.component_mul(&parts.psi1);
    let s: f64 = e.sum();
    // ∂/∂μ = Σ e_m B r_m
    out.mean += parts.rb.transpose() * &e;
    let mut rbw = parts.rb.clone();
    for (i, mut row) in rbw.row_iter_mut().enumerate() {
        row *= e[i];
    }
    let gx = parts.b.clone() * (-0.5 * s) + parts.rb.transpose() * &rbw * 0.5;
    for i in 0..lam.len() {
        out.lam[i] += 0.5 * s / lam[i] + gx[(i, i)];
    }
    out.cov += gx;
    out.log_var += s;
    out.z -= rbw;
}

/// `E[a k(x, z_m)]` for a scalar `a` jointly Gaussian with `x`, given
/// `E[a] = target_mean` and `Cov(x, a) = cross`.
pub(crate) fn weighted_psi1(
    parts: &Psi1Parts,
    target_mean: f64,
    cross: &DVector<f64>,
) -> DVector<f64> {
    let proj = &parts.rb * cross;
    DVector::from_fn(parts.psi1.len(), |m, _| parts.psi1[m] * (target_mean + proj[m]))
}

/// Reverse pass of [`weighted_psi1`]. Returns `(∂/∂target_mean, ∂/∂cross)` and
/// accumulates input and kernel gradients into `out`.
pub(crate) fn weighted_psi1_backward(
    parts: &Psi1Parts,
    target_mean: f64,
    cross: &DVector<f64>,
    g_c: &DVector<f64>,
    z: &DMatrix<f64>,
    lam: &DVector<f64>,
    out: &mut PsiGrads,
) -> (f64, DVector<f64>) {
    let proj = &parts.rb * cross;
    let h = proj.add_scalar(target_mean);
    let g_psi1 = g_c.component_mul(&h);
    let gh = g_c.component_mul(&parts.psi1);
    psi1_backward(parts, &g_psi1, lam, out);
    let sum_gh = gh.sum();
    let g_cross = parts.rb.transpose() * &gh;
    let bw = &parts.b * cross;
    // r_m = z_m - μ
    for m in 0..z.nrows() {
        for i in 0..bw.len() {
            out.z[(m, i)] += gh[m] * bw[i];
        }
    }
    out.mean -= &bw * sum_gh;
    let gx = -(&bw * g_cross.transpose());
    for i in 0..lam.len() {
        out.lam[i] += gx[(i, i)];
    }
    out.cov += gx;
    (sum_gh, g_cross)
}

/// Step-independent pieces of Ψ2 for one kernel.
pub(crate) struct Psi2Cache {
    lam: DVector<f64>,
    /// `-¼ (z_m - z_m')ᵀ Λ⁻¹ (z_m - z_m')`
    log_pair: DMatrix<f64>,
    half_logdet_half_lam: f64,
}

impl Psi2Cache {
    pub fn new(k: &ArdRbfKernel, z: &DMatrix<f64>) -> Self {
        let lam = k.lambda();
        let m = z.nrows();
        let mut log_pair = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a + 1..m {
                let q: f64 = (0..lam.len()).map(|d| (z[(a, d)] - z[(b, d)]).powi(2) / lam[d]).sum();
                log_pair[(a, b)] = -0.25 * q;
                log_pair[(b, a)] = -0.25 * q;
            }
        }
        let half_logdet_half_lam = 0.5 * lam.iter().map(|v| (0.5 * v).ln()).sum::<f64>();
        Self { lam, log_pair, half_logdet_half_lam }
    }
}

/// Forward quantities of Ψ2 reused by the reverse pass.
pub(crate) struct Psi2Parts {
    pub psi2: DMatrix<f64>,
    /// `P = (Λ/2 + S)⁻¹`
    pub p: DMatrix<f64>,
}

pub(crate) fn psi2_forward(
    k: &ArdRbfKernel,
    cache: &Psi2Cache,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<Psi2Parts> {
    let lam = &cache.lam;
    let mut x = cov.clone();
    for i in 0..lam.len() {
        x[(i, i)] += 0.5 * lam[i];
    }
    let l = psd_factor(&x, "psi2 (Λ/2 + S)")?;
    let p = crate::linalg::inverse_from_factor(&l);
    let log_scale = 2.0 * k.log_variance + cache.half_logdet_half_lam - 0.5 * logdet_from_factor(&l);
    let zp = z * &p; // M×D
    let q = &zp * mean; // q_m = z_mᵀ P μ
    let mpm = mean.dot(&(&p * mean));
    let m = z.nrows();
    let g_diag = DVector::from_fn(m, |i, _| zp.row(i).dot(&z.row(i)));
    let g = &zp * z.transpose();
    let mut psi2 = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            // (μ - z̄)ᵀ P (μ - z̄)
            let quad = mpm - q[a] - q[b] + 0.25 * (g_diag[a] + 2.0 * g[(a, b)] + g_diag[b]);
            let v = (log_scale + cache.log_pair[(a, b)] - 0.5 * quad).exp();
            psi2[(a, b)] = v;
            psi2[(b, a)] = v;
        }
    }
    Ok(Psi2Parts { psi2, p })
}

/// Reverse pass of Ψ2 given a symmetric `∂L/∂Ψ2`.
pub(crate) fn psi2_backward(
    parts: &Psi2Parts,
    g_psi2: &DMatrix<f64>,
    mean: &DVector<f64>,
    z: &DMatrix<f64>,
    lam: &DVector<f64>,
    out: &mut PsiGrads,
) {
    let e = g_psi2.component_mul(&parts.psi2);
    let s: f64 = e.sum();
    let rho = DVector::from_fn(e.nrows(), |i, _| e.row(i).sum());
    let ez = &e * z; // M×D
    let zt_rho = z.transpose() * &rho;
    let p = &parts.p;
    out.mean -= p * (mean * s - &zt_rho);
    let mut zr = z.clone();
    for (i, mut row) in zr.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let ztdz = z.transpose() * &zr;
    let ztez = z.transpose() * &ez;
    let srr = mean * mean.transpose() * s - mean * zt_rho.transpose() - &zt_rho * mean.transpose()
        + (&ztdz + &ztez) * 0.5;
    let gx = p * (-0.5 * s) + p * srr * p * 0.5;
    for i in 0..lam.len() {
        out.lam[i] += 0.5 * (ztdz[(i, i)] - ztez[(i, i)]) / (lam[i] * lam[i])
            + 0.5 * s / lam[i]
            + 0.5 * gx[(i, i)];
    }
    out.cov += gx;
    out.log_var += 2.0 * s;
    // rows of Z
    let mu_p = p * mean;
    for m in 0..z.nrows() {
        let zp_m = p * z.row(m).transpose();
        let ezp_m = p * ez.row(m).transpose();
        for i in 0..lam.len() {
            let from_quad = rho[m] * mu_p[i] - 0.5 * rho[m] * zp_m[i] - 0.5 * ezp_m[i];
            let from_pair = -(rho[m] * z[(m, i)] - ez[(m, i)]) / lam[i];
            out.z[(m, i)] += from_quad + from_pair;
        }
    }
}

/// `E[k1(x, z_m) k2(x, z_m')]` for two kernels sharing the inducing inputs.
pub(crate) fn psi2_cross_kernels(
    k1: &ArdRbfKernel,
    k2: &ArdRbfKernel,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (l1, l2) = (k1.lambda(), k2.lambda());
    let d = l1.len();
    // combined precision Π = Λ1⁻¹ + Λ2⁻¹ (diagonal); its inverse is the width of the product
    let pi_inv = DVector::from_fn(d, |i, _| l1[i] * l2[i] / (l1[i] + l2[i]));
    let mut x = cov.clone();
    for i in 0..d {
        x[(i, i)] += pi_inv[i];
    }
    let l = psd_factor(&x, "psi2 (Π⁻¹ + S)")?;
    let p = crate::linalg::inverse_from_factor(&l);
    let log_scale = k1.log_variance + k2.log_variance
        + 0.5 * pi_inv.iter().map(|v| v.ln()).sum::<f64>()
        - 0.5 * logdet_from_factor(&l);
    let m = z.nrows();
    let w1 = DVector::from_fn(d, |i, _| l2[i] / (l1[i] + l2[i]));
    let mut out = DMatrix::zeros(m, m);
    let mut r = DVector::zeros(d);
    for a in 0..m {
        for b in 0..m {
            let mut pair = 0.0;
            for i in 0..d {
                let (za, zb) = (z[(a, i)], z[(b, i)]);
                pair += (za - zb).powi(2) / (l1[i] + l2[i]);
                r[i] = mean[i] - (w1[i] * za + (1.0 - w1[i]) * zb);
            }
            let quad = r.dot(&(&p * &r));
            out[(a, b)] = (log_scale - 0.5 * pair - 0.5 * quad).exp();
        }
    }
    Ok(out)
}

/// Reverse pass of `K_zz + jitter` given `∂L/∂K`.
pub(crate) fn gram_backward(
    k: &ArdRbfKernel,
    kzz: &DMatrix<f64>,
    g_k: &DMatrix<f64>,
    z: &DMatrix<f64>,
    out: &mut PsiGrads,
) {
    let g = crate::linalg::sym(g_k);
    let lam = k.lambda();
    // kzz includes the jitter on its diagonal; it scales with σ² too
    let e = g.component_mul(kzz);
    out.log_var += e.sum();
    let mut e_off = e.clone();
    for i in 0..e_off.nrows() {
        e_off[(i, i)] = 0.0;
    }
    let rho = DVector::from_fn(e_off.nrows(), |i, _| e_off.row(i).sum());
    let ez = &e_off * z;
    for d in 0..lam.len() {
        let mut acc = 0.0;
        for m in 0..z.nrows() {
            acc += rho[m] * z[(m, d)] * z[(m, d)];
        }
        let ztez: f64 = (0..z.nrows()).map(|m| z[(m, d)] * ez[(m, d)]).sum();
        out.lam[d] += (acc - ztez) / (lam[d] * lam[d]);
        for m in 0..z.nrows() {
            out.z[(m, d)] += -2.0 * (rho[m] * z[(m, d)] - ez[(m, d)]) / lam[d];
        }
    }
}
