//! Inducing-point GP over the transition function.
//!
//! Each state dimension `d` has its own GP `f_d = m_d + g_d` with kernel `k_d`,
//! all sharing the inducing inputs `Z`. The inducing values `u_d = g_d(Z)` carry
//! a Gaussian `q(u_d) = N(μ_d, S_d)`; the rest of the function follows the prior
//! conditional `p(g_d | u_d)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpssmError, Result};
use crate::gaussian::{validate_factor, GaussianDist};
use crate::kernel::{psi1_forward, psi2_cross_kernels, ArdRbfKernel};
use crate::linalg::{cholesky_jitter, inverse_from_factor, logdet_from_factor, lower_solve, lower_solve_vec, psd_factor};

/// Prior mean of the transition function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanFunction {
    /// `m(x) = 0`
    #[default]
    Zero,
    /// `m(x) = x`: the GP models the residual `x_t - x_{t-1}`.
    Identity,
}

impl MeanFunction {
    pub(crate) fn weight(self) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for MeanFunction {
    type Err = GpssmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(MeanFunction::Zero),
            "identity" => Ok(MeanFunction::Identity),
            other => Err(GpssmError::InvalidParameter(format!("unknown mean function '{other}'"))),
        }
    }
}

/// Inducing inputs, one per row (state dimensions followed by controls).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInducing", into = "RawInducing")]
pub struct InducingSet {
    z: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawInducing {
    #[serde(with = "crate::serde_mat::mat")]
    z: DMatrix<f64>,
}

impl TryFrom<RawInducing> for InducingSet {
    type Error = GpssmError;
    fn try_from(r: RawInducing) -> Result<Self> {
        InducingSet::new(r.z)
    }
}

impl From<InducingSet> for RawInducing {
    fn from(s: InducingSet) -> Self {
        RawInducing { z: s.z }
    }
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(GpssmError::InvalidParameter("need at least one inducing input".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GpssmError::InvalidParameter("non-finite inducing input".into()));
        }
        for a in 0..z.nrows() {
            for b in a + 1..z.nrows() {
                if z.row(a) == z.row(b) {
                    return Err(GpssmError::InvalidParameter(format!(
                        "inducing inputs {a} and {b} coincide"
                    )));
                }
            }
        }
        Ok(Self { z })
    }

    /// Evenly covers the box `[lo, hi]` with `m` points: a grid in 1-D, a
    /// deterministic low-discrepancy (Halton) set otherwise.
    pub fn covering(lo: &DVector<f64>, hi: &DVector<f64>, m: usize) -> Result<Self> {
        let d = lo.len();
        let z = if d == 1 {
            DMatrix::from_fn(m, 1, |i, _| {
                if m == 1 {
                    0.5 * (lo[0] + hi[0])
                } else {
                    lo[0] + (hi[0] - lo[0]) * i as f64 / (m - 1) as f64
                }
            })
        } else {
            const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
            DMatrix::from_fn(m, d, |i, j| {
                let u = halton(i as u64 + 1, PRIMES[j % PRIMES.len()]);
                lo[j] + (hi[j] - lo[j]) * u
            })
        };
        Self::new(z)
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }
}

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `q(u) = Π_d N(μ_d, L_d L_dᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPosterior", into = "RawPosterior")]
pub struct SparseGpPosterior {
    means: Vec<DVector<f64>>,
    cov_factors: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawPosterior {
    #[serde(with = "crate::serde_mat::vec_vec")]
    means: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_mat::mat_vec")]
    cov_factors: Vec<DMatrix<f64>>,
}

impl TryFrom<RawPosterior> for SparseGpPosterior {
    type Error = GpssmError;
    fn try_from(r: RawPosterior) -> Result<Self> {
        SparseGpPosterior::new(r.means, r.cov_factors)
    }
}

impl From<SparseGpPosterior> for RawPosterior {
    fn from(p: SparseGpPosterior) -> Self {
        RawPosterior { means: p.means, cov_factors: p.cov_factors }
    }
}

impl SparseGpPosterior {
    pub fn new(means: Vec<DVector<f64>>, mut cov_factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.len() != cov_factors.len() || means.is_empty() {
            return Err(GpssmError::DimensionMismatch(
                "one mean and one factor per output dimension".into(),
            ));
        }
        let m = means[0].len();
        for (mu, l) in means.iter().zip(cov_factors.iter_mut()) {
            if mu.len() != m || l.shape() != (m, m) {
                return Err(GpssmError::DimensionMismatch("inducing posterior shapes".into()));
            }
            validate_factor(l, true)?;
        }
        Ok(Self { means, cov_factors })
    }

    /// `q(u) = p(u)` for every output dimension.
    pub fn prior(kernels: &[ArdRbfKernel], z: &InducingSet) -> Result<Self> {
        let mut means = Vec::new();
        let mut factors = Vec::new();
        for k in kernels {
            let (ch, _) = cholesky_jitter(&k.gram_jittered(z.z()), 0.0, "K_zz")?;
            means.push(DVector::zeros(z.len()));
            factors.push(ch.l());
        }
        Self::new(means, factors)
    }

    pub fn output_dim(&self) -> usize {
        self.means.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, d: usize) -> &DVector<f64> {
        &self.means[d]
    }

    pub fn cov_factor(&self, d: usize) -> &DMatrix<f64> {
        &self.cov_factors[d]
    }

    pub fn covariance(&self, d: usize) -> DMatrix<f64> {
        &self.cov_factors[d] * self.cov_factors[d].transpose()
    }

    pub fn marginal(&self, d: usize) -> Result<GaussianDist> {
        GaussianDist::new_clamped(self.means[d].clone(), self.cov_factors[d].clone())
    }
}

fn check_kernels(kernels: &[ArdRbfKernel], z: &InducingSet) -> Result<()> {
    if kernels.iter().any(|k| k.input_dim() != z.input_dim()) {
        return Err(GpssmError::DimensionMismatch(format!(
            "kernels must take {}-dimensional inputs",
            z.input_dim()
        )));
    }
    Ok(())
}

/// `Σ_d KL(q(u_d) ‖ N(0, K_zz^(d)))`.
pub fn prior_kl(q_u: &SparseGpPosterior, z: &InducingSet, kernels: &[ArdRbfKernel]) -> Result<f64> {
    check_kernels(kernels, z)?;
    if kernels.len() != q_u.output_dim() || q_u.num_inducing() != z.len() {
        return Err(GpssmError::DimensionMismatch("prior KL shapes".into()));
    }
    let m = z.len() as f64;
    let mut total = 0.0;
    for (d, k) in kernels.iter().enumerate() {
        let (ch, _) = cholesky_jitter(&k.gram_jittered(z.z()), 0.0, "K_zz")?;
        let lk = ch.l();
        let a = lower_solve(&lk, q_u.cov_factor(d));
        let b = lower_solve_vec(&lk, q_u.mean(d));
        total += 0.5
            * (a.norm_squared() + b.norm_squared() - m + logdet_from_factor(&lk)
                - logdet_from_factor(q_u.cov_factor(d)));
    }
    Ok(total.max(0.0))
}

/// Expected-transition sufficient statistics for one output dimension.
///
/// With `a_t = x_{t,d} - m_d(x_{t-1})` and `k_t = k_d(x̃_{t-1}, Z)`:
/// `target_sq = Σ E[a_t²]`, `cross = Σ E[a_t k_t]`, `psi2 = Σ E[k_t k_tᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DimStats {
    pub count: usize,
    pub target_sq: f64,
    pub cross: DVector<f64>,
    pub psi2: DMatrix<f64>,
}

impl DimStats {
    pub fn zeros(m: usize) -> Self {
        Self { count: 0, target_sq: 0.0, cross: DVector::zeros(m), psi2: DMatrix::zeros(m, m) }
    }
}

/// Statistics for all output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    pub dims: Vec<DimStats>,
}

/// Whitened factorizations for the collapsed `q(u)`, with `L = chol(K)`.
pub(crate) struct OptimalQuParts {
    pub kzz: DMatrix<f64>,
    pub l: DMatrix<f64>,
    /// `L⁻¹ Φ L⁻ᵀ`
    pub phi_w: DMatrix<f64>,
    /// `L⁻¹ c`
    pub cross_w: DVector<f64>,
    /// `B = I + L⁻¹ Φ L⁻ᵀ / Q`
    pub b_chol: Cholesky<f64, Dyn>,
}

pub(crate) fn optimal_qu_parts(
    stats: &DimStats,
    kernel: &ArdRbfKernel,
    z: &InducingSet,
    q: f64,
) -> Result<OptimalQuParts> {
    let kzz = kernel.gram_jittered(z.z());
    let (k_chol, _) = cholesky_jitter(&kzz, 0.0, "K_zz")?;
    let l = k_chol.l();
    let half = lower_solve(&l, &stats.psi2);
    let phi_w = crate::linalg::sym(&lower_solve(&l, &half.transpose()));
    let cross_w = lower_solve_vec(&l, &stats.cross);
    let b = DMatrix::identity(kzz.nrows(), kzz.ncols()) + &phi_w / q;
    let (b_chol, _) = cholesky_jitter(&b, 0.0, "I + Φ/Q (whitened)").map_err(|_| GpssmError::Numerical {
        term: "optimal q(u)".into(),
        detail: "normal equations K + Φ/Q are singular".into(),
    })?;
    Ok(OptimalQuParts { kzz, l, phi_w, cross_w, b_chol })
}

/// The closed-form maximizer of the bound over `q(u)` with everything else fixed:
/// `S = K (K + Φ/Q)⁻¹ K`, `μ = K (K + Φ/Q)⁻¹ c / Q`.
pub fn optimal_qu(
    stats: &TransitionStats,
    kernels: &[ArdRbfKernel],
    z: &InducingSet,
    process_noise: &DVector<f64>,
) -> Result<SparseGpPosterior> {
    check_kernels(kernels, z)?;
    if stats.dims.len() != kernels.len() || process_noise.len() != kernels.len() {
        return Err(GpssmError::DimensionMismatch("optimal q(u) inputs".into()));
    }
    let mut means = Vec::new();
    let mut factors = Vec::new();
    for (d, k) in kernels.iter().enumerate() {
        let q = process_noise[d];
        let parts = optimal_qu_parts(&stats.dims[d], k, z, q)?;
        // S = L B⁻¹ Lᵀ, μ = L B⁻¹ L⁻¹ c / Q
        means.push(&parts.l * parts.b_chol.solve(&parts.cross_w) / q);
        let x = lower_solve(&parts.b_chol.l(), &parts.l.transpose());
        let s = x.transpose() * x;
        factors.push(psd_factor(&s, "optimal q(u) covariance")?);
    }
    SparseGpPosterior::new(means, factors)
}

/// Gradient of the explicit (non-collapsed) bound with respect to the moments of
/// `q(u_d)`: returns `(∂/∂μ_d, ∂/∂S_d)` for every output dimension.
pub fn qu_moment_gradient(
    stats: &TransitionStats,
    q_u: &SparseGpPosterior,
    kernels: &[ArdRbfKernel],
    z: &InducingSet,
    process_noise: &DVector<f64>,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let mut out = Vec::new();
    for (d, k) in kernels.iter().enumerate() {
        let q = process_noise[d];
        let st = &stats.dims[d];
        let (ch, _) = cholesky_jitter(&k.gram_jittered(z.z()), 0.0, "K_zz")?;
        let kinv = ch.inverse();
        let mu = q_u.mean(d);
        let s_inv = inverse_from_factor(q_u.cov_factor(d));
        let g_mu = &kinv * (&st.cross / q - &st.psi2 * (&kinv * mu) / q) - &kinv * mu;
        let g_s = -(&kinv * &st.psi2 * &kinv) / (2.0 * q) - &kinv * 0.5 + s_inv * 0.5;
        out.push((g_mu, g_s));
    }
    Ok(out)
}

/// Moments of `f(x)` under an uncertain input `x ~ N(μ, S)`.
#[derive(Debug, Clone)]
pub struct UncertainMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `Cov(x, f(x))`, one row per input dimension.
    pub input_cross: DMatrix<f64>,
}

/// Transition GP ready for prediction: kernels, inducing inputs, `q(u)` and
/// the derived solves needed at test points.
#[derive(Debug, Clone)]
pub struct TransitionGp {
    kernels: Vec<ArdRbfKernel>,
    inducing: InducingSet,
    q_u: SparseGpPosterior,
    mean_fn: MeanFunction,
    /// `K⁻¹ μ_d`
    alpha: Vec<DVector<f64>>,
    /// `K⁻¹ - K⁻¹ S_d K⁻¹`
    var_reduction: Vec<DMatrix<f64>>,
    k_factors: Vec<DMatrix<f64>>,
}

impl TransitionGp {
    pub fn new(
        kernels: Vec<ArdRbfKernel>,
        inducing: InducingSet,
        q_u: SparseGpPosterior,
        mean_fn: MeanFunction,
    ) -> Result<Self> {
        check_kernels(&kernels, &inducing)?;
        if kernels.len() != q_u.output_dim() || q_u.num_inducing() != inducing.len() {
            return Err(GpssmError::DimensionMismatch("transition GP shapes".into()));
        }
        if kernels.len() > inducing.input_dim() {
            return Err(GpssmError::DimensionMismatch(
                "more outputs than kernel input dimensions".into(),
            ));
        }
        let mut alpha = Vec::new();
        let mut var_reduction = Vec::new();
        let mut k_factors = Vec::new();
        for (d, k) in kernels.iter().enumerate() {
            let (ch, _) = cholesky_jitter(&k.gram_jittered(inducing.z()), 0.0, "K_zz")?;
            let kinv = ch.inverse();
            alpha.push(ch.solve(q_u.mean(d)));
            let ks = &kinv * q_u.cov_factor(d);
            var_reduction.push(&kinv - &ks * ks.transpose());
            k_factors.push(ch.l());
        }
        Ok(Self { kernels, inducing, q_u, mean_fn, alpha, var_reduction, k_factors })
    }

    pub fn kernels(&self) -> &[ArdRbfKernel] {
        &self.kernels
    }

    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    pub fn q_u(&self) -> &SparseGpPosterior {
        &self.q_u
    }

    pub fn mean_fn(&self) -> MeanFunction {
        self.mean_fn
    }

    pub fn output_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.input_dim()
    }

    pub(crate) fn alpha(&self, d: usize) -> &DVector<f64> {
        &self.alpha[d]
    }

    pub(crate) fn var_reduction(&self, d: usize) -> &DMatrix<f64> {
        &self.var_reduction[d]
    }

    fn check_input(&self, n: usize) -> Result<()> {
        if n != self.input_dim() {
            return Err(GpssmError::DimensionMismatch(format!(
                "input has dimension {n}, transition GP expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Marginal mean and variance of `f(x)` at a deterministic input.
    pub fn conditional_moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_input(x.len())?;
        let dout = self.output_dim();
        let phi = self.mean_fn.weight();
        let mut mean = DVector::zeros(dout);
        let mut var = DVector::zeros(dout);
        for d in 0..dout {
            let kx = self.kernels[d].kvec(x, self.inducing.z());
            mean[d] = phi * x[d] + kx.dot(&self.alpha[d]);
            let red = kx.dot(&(&self.var_reduction[d] * &kx));
            var[d] = (self.kernels[d].variance() - red).max(0.0);
        }
        Ok((mean, var))
    }

    /// Exact mean, covariance and input–output covariance of `f(x)` for
    /// `x ~ q_in`. With `full_cov = false` cross-output covariances of the GP
    /// part are dropped.
    pub fn uncertain_conditional_moments(
        &self,
        q_in: &GaussianDist,
        full_cov: bool,
    ) -> Result<UncertainMoments> {
        self.check_input(q_in.dim())?;
        self.moments_from_raw(q_in.mean(), &q_in.covariance(), full_cov)
    }

    pub(crate) fn moments_from_raw(
        &self,
        mean_in: &DVector<f64>,
        cov_in: &DMatrix<f64>,
        full_cov: bool,
    ) -> Result<UncertainMoments> {
        let dout = self.output_dim();
        let din = self.input_dim();
        let z = self.inducing.z();
        let phi = self.mean_fn.weight();
        let mut g_mean = DVector::zeros(dout);
        let mut g_cov = DMatrix::zeros(dout, dout);
        let mut xg = DMatrix::zeros(din, dout);
        let mut psi1s = Vec::with_capacity(dout);
        for d in 0..dout {
            let p1 = psi1_forward(&self.kernels[d], mean_in, cov_in, z)?;
            g_mean[d] = p1.psi1.dot(&self.alpha[d]);
            // Cov(x, g_d) = S Σ_m α_m ψ1_m B r_m
            let w = p1.psi1.component_mul(&self.alpha[d]);
            xg.set_column(d, &(cov_in * (p1.rb.transpose() * w)));
            psi1s.push(p1);
        }
        for d in 0..dout {
            for e in d..dout {
                if d != e && !full_cov {
                    continue;
                }
                let p2 = psi2_cross_kernels(&self.kernels[d], &self.kernels[e], mean_in, cov_in, z)?;
                let mut v = self.alpha[d].dot(&(&p2 * &self.alpha[e])) - g_mean[d] * g_mean[e];
                if d == e {
                    v += self.kernels[d].variance() - crate::linalg::frob(&self.var_reduction[d], &p2);
                    v = v.max(0.0);
                }
                g_cov[(d, e)] = v;
                g_cov[(e, d)] = v;
            }
        }
        let mean_state = mean_in.rows(0, dout);
        let mean = mean_state * phi + &g_mean;
        let s_state = cov_in.view((0, 0), (dout, dout));
        let xg_state = xg.rows(0, dout);
        let cov = s_state * (phi * phi) + &g_cov + (xg_state + xg_state.transpose()) * phi;
        let input_cross = cov_in.columns(0, dout) * phi + &xg;
        Ok(UncertainMoments { mean, cov: crate::linalg::sym(&cov), input_cross })
    }

    /// A function-path sampler consistent with `q(f)`.
    pub fn sample_function_path<R: Rng + ?Sized>(&self, rng: &mut R) -> FunctionSampler<'_> {
        FunctionSampler::new(self, rng)
    }
}

/// Incrementally draws one function `f ~ q(f)` at the inputs it is queried on.
///
/// `u ~ q(u)` is drawn at construction; every evaluation conditions on `u` and on
/// all previous evaluations, so repeated queries return the same value.
pub struct FunctionSampler<'a> {
    gp: &'a TransitionGp,
    rng: ChaCha8Rng,
    inputs: Vec<DVector<f64>>,
    values: Vec<DVector<f64>>,
    /// Per output: lower factor of the prior covariance of `[u; g(inputs)]`.
    factors: Vec<DMatrix<f64>>,
    /// Per output: `L⁻¹ [u; g(inputs)]`.
    whitened: Vec<DVector<f64>>,
}

const SAMPLER_JITTER: f64 = 1e-10;

impl<'a> FunctionSampler<'a> {
    fn new<R: Rng + ?Sized>(gp: &'a TransitionGp, rng: &mut R) -> Self {
        let mut own = ChaCha8Rng::seed_from_u64(rng.random());
        let mut factors = Vec::new();
        let mut whitened = Vec::new();
        for d in 0..gp.output_dim() {
            let eps = DVector::from_fn(gp.q_u.num_inducing(), |_, _| own.sample::<f64, _>(StandardNormal));
            let u = gp.q_u.mean(d) + gp.q_u.cov_factor(d) * eps;
            let l = gp.k_factors[d].clone();
            whitened.push(lower_solve_vec(&l, &u));
            factors.push(l);
        }
        Self { gp, rng: own, inputs: Vec::new(), values: Vec::new(), factors, whitened }
    }

    /// Evaluates the sampled function (including the mean function) at `x`.
    pub fn next(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.gp.check_input(x.len())?;
        if let Some(i) = self.inputs.iter().position(|p| p == x) {
            return Ok(self.values[i].clone());
        }
        let gp = self.gp;
        let dout = gp.output_dim();
        let phi = gp.mean_fn.weight();
        let mut out = DVector::zeros(dout);
        for d in 0..dout {
            let k = &gp.kernels[d];
            let mut kv = k.kvec(x, gp.inducing.z());
            let prev: Vec<f64> = self.inputs.iter().map(|p| k.eval(x, p).unwrap()).collect();
            kv = DVector::from_iterator(kv.len() + prev.len(), kv.iter().copied().chain(prev));
            let l = &self.factors[d];
            let lk = lower_solve_vec(l, &kv);
            let mean = lk.dot(&self.whitened[d]);
            let var = (k.variance() - lk.norm_squared()).max(0.0);
            let eps: f64 = self.rng.sample(StandardNormal);
            let g = mean + var.sqrt() * eps;
            // grow the factor with the new point
            let n = l.nrows();
            let diag = (var + SAMPLER_JITTER * k.variance()).sqrt();
            let mut grown = DMatrix::zeros(n + 1, n + 1);
            grown.view_mut((0, 0), (n, n)).copy_from(l);
            for j in 0..n {
                grown[(n, j)] = lk[j];
            }
            grown[(n, n)] = diag;
            self.factors[d] = grown;
            let w = &mut self.whitened[d];
            let next_w = (g - mean) / diag;
            *w = DVector::from_iterator(n + 1, w.iter().copied().chain(std::iter::once(next_w)));
            out[d] = phi * x[d] + g;
        }
        self.inputs.push(x.clone());
        self.values.push(out.clone());
        Ok(out)
    }
}

/// `KL` of one output's `q(u)` against its prior via materialized Gaussians.
#[cfg(test)]
pub(crate) fn prior_kl_dense(q_u: &SparseGpPosterior, z: &InducingSet, kernels: &[ArdRbfKernel]) -> Result<f64> {
    let mut total = 0.0;
    for (d, k) in kernels.iter().enumerate() {
        let prior = GaussianDist::from_covariance(DVector::zeros(z.len()), &k.gram_jittered(z.z()))?;
        total += crate::gaussian::gaussian_kl(&q_u.marginal(d)?, &prior)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Psi2Cache, psi2_forward, weighted_psi1};

    fn kernels(n: usize, din: usize) -> Vec<ArdRbfKernel> {
        (0..n)
            .map(|d| ArdRbfKernel::new(0.8 + 0.3 * d as f64, DVector::from_fn(din, |i, _| 0.6 + 0.2 * (i + d) as f64)).unwrap())
            .collect()
    }

    fn random_qu(rng: &mut ChaCha8Rng, d: usize, m: usize) -> SparseGpPosterior {
        let means = (0..d).map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5)).collect();
        let factors = (0..d)
            .map(|_| DMatrix::from_fn(m, m, |i, j| if i == j { 0.2 + 0.3 * rng.random::<f64>() } else if i > j { 0.1 * (rng.random::<f64>() - 0.5) } else { 0.0 }))
            .collect();
        SparseGpPosterior::new(means, factors).unwrap()
    }

    #[test]
    fn duplicate_inducing_rejected() {
        let z = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        assert!(InducingSet::new(z).is_err());
    }

    #[test]
    fn prior_kl_cases() {
        let z = InducingSet::new(DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0])).unwrap();
        let ks = kernels(2, 1);
        let prior = SparseGpPosterior::prior(&ks, &z).unwrap();
        assert!(prior_kl(&prior, &z, &ks).unwrap() < 1e-10);

        // M = 1, prior variance 1 (after jitter), q = N(1, 1)
        let z1 = InducingSet::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let k1 = vec![ArdRbfKernel::new(1.0 / (1.0 + crate::kernel::GRAM_JITTER), DVector::from_element(1, 1.0)).unwrap()];
        let q = SparseGpPosterior::new(vec![DVector::from_element(1, 1.0)], vec![DMatrix::identity(1, 1)]).unwrap();
        assert!((prior_kl(&q, &z1, &k1).unwrap() - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_qu(&mut rng, 2, 3);
        let a = prior_kl(&q, &z, &ks).unwrap();
        let b = prior_kl_dense(&q, &z, &ks).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn conditional_reverts_to_prior_and_interpolates() {
        let z = InducingSet::new(DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0])).unwrap();
        let ks = kernels(1, 1);
        let gp = TransitionGp::new(ks.clone(), z.clone(), SparseGpPosterior::prior(&ks, &z).unwrap(), MeanFunction::Zero).unwrap();
        let (m, v) = gp.conditional_moments(&DVector::from_element(1, 40.0)).unwrap();
        assert!(m[0].abs() < 1e-12);
        assert!((v[0] - ks[0].variance()).abs() < 1e-12);
        let (_, v) = gp.conditional_moments(&DVector::from_element(1, 0.3)).unwrap();
        assert!((v[0] - ks[0].variance()).abs() < 1e-6);

        let mu = DVector::from_vec(vec![0.4, -0.2, 0.9]);
        let q = SparseGpPosterior::new(vec![mu.clone()], vec![DMatrix::identity(3, 3) * 1e-8]).unwrap();
        let gp = TransitionGp::new(ks, z, q, MeanFunction::Zero).unwrap();
        let (m, v) = gp.conditional_moments(&DVector::from_element(1, 0.0)).unwrap();
        assert!((m[0] + 0.2).abs() < 1e-5);
        assert!(v[0] < 1e-5);
    }

    #[test]
    fn conditional_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = InducingSet::new(DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, 0.5, 1.0, -0.5, 0.3, 0.9])).unwrap();
        let ks = kernels(2, 2);
        let q = random_qu(&mut rng, 2, 4);
        let gp = TransitionGp::new(ks, z, q, MeanFunction::Identity).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let (m, v) = gp.conditional_moments(&x).unwrap();
        let n = 40_000;
        let mut sum = DVector::zeros(2);
        let mut sq = DVector::zeros(2);
        for _ in 0..n {
            let mut s = gp.sample_function_path(&mut rng);
            let f = s.next(&x).unwrap();
            sum += &f;
            sq += f.component_mul(&f);
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            assert!((mean - m[d]).abs() < 3.0 * (v[d] / n as f64).sqrt(), "mean {mean} vs {}", m[d]);
            assert!((var - v[d]).abs() < 3.0 * v[d] * (2.0 / n as f64).sqrt(), "var {var} vs {}", v[d]);
        }
    }

    #[test]
    fn sampler_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = InducingSet::new(DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0])).unwrap();
        let ks = kernels(1, 1);
        let q = random_qu(&mut rng, 1, 3);
        let gp = TransitionGp::new(ks.clone(), z.clone(), q, MeanFunction::Zero).unwrap();
        let mut s = gp.sample_function_path(&mut rng);
        let x = DVector::from_element(1, 0.37);
        let a = s.next(&x).unwrap();
        let _ = s.next(&DVector::from_element(1, 0.5)).unwrap();
        let b = s.next(&x).unwrap();
        assert!((&a - &b).amax() < 1e-10);
        // very close inputs give very close values
        let c = s.next(&DVector::from_element(1, 0.37 + 1e-9)).unwrap();
        assert!((c[0] - a[0]).abs() < 1e-3);

        let mu = DVector::from_vec(vec![0.4, -0.2, 0.9]);
        let q = SparseGpPosterior::new(vec![mu], vec![DMatrix::identity(3, 3) * 1e-8]).unwrap();
        let gp = TransitionGp::new(ks, z, q, MeanFunction::Zero).unwrap();
        let mut s = gp.sample_function_path(&mut rng);
        let v = s.next(&DVector::from_element(1, 1.0)).unwrap();
        // K_zz carries a 1e-6 relative jitter, so the draw at an inducing input has std ~1e-3
        assert!((v[0] - 0.9).abs() < 5e-3);
    }

    #[test]
    fn uncertain_moments_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = InducingSet::new(DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, 0.5, 1.0, -0.5, 0.3, 0.9])).unwrap();
        let ks = kernels(2, 2);
        let q = random_qu(&mut rng, 2, 4);
        let gp = TransitionGp::new(ks.clone(), z.clone(), q, MeanFunction::Zero).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.1]);
        let (m, v) = gp.conditional_moments(&x).unwrap();
        let um = gp.moments_from_raw(&x, &DMatrix::zeros(2, 2), true).unwrap();
        assert!((&um.mean - &m).amax() < 1e-10);
        for d in 0..2 {
            assert!((um.cov[(d, d)] - v[d]).abs() < 1e-10);
        }
        assert!(um.cov[(0, 1)].abs() < 1e-10);

        let gp = TransitionGp::new(ks.clone(), z.clone(), SparseGpPosterior::prior(&ks, &z).unwrap(), MeanFunction::Zero).unwrap();
        let qin = GaussianDist::isotropic(x, 0.4).unwrap();
        let um = gp.uncertain_conditional_moments(&qin, true).unwrap();
        assert!(um.mean.amax() < 1e-12);
        for d in 0..2 {
            assert!((um.cov[(d, d)] - ks[d].variance()).abs() < 1e-6);
        }
        assert!(um.cov[(0, 1)].abs() < 1e-12);
    }

    fn random_stats(rng: &mut ChaCha8Rng, ks: &[ArdRbfKernel], z: &InducingSet, n: usize) -> TransitionStats {
        let din = z.input_dim();
        let mut dims: Vec<DimStats> = ks.iter().map(|_| DimStats::zeros(z.len())).collect();
        for _ in 0..n {
            let mean = DVector::from_fn(din, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let cov = DMatrix::identity(din, din) * 0.05;
            for (d, k) in ks.iter().enumerate() {
                let p1 = psi1_forward(k, &mean, &cov, z.z()).unwrap();
                let tm = mean[0].sin();
                let cross = DVector::from_fn(din, |i, _| 0.01 * i as f64);
                dims[d].cross += weighted_psi1(&p1, tm, &cross);
                dims[d].psi2 += psi2_forward(k, &Psi2Cache::new(k, z.z()), &mean, &cov, z.z()).unwrap().psi2;
                dims[d].target_sq += tm * tm + 0.01;
                dims[d].count += 1;
            }
        }
        TransitionStats { dims }
    }

    #[test]
    fn optimal_qu_has_zero_moment_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = InducingSet::covering(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0), 5).unwrap();
        let ks = kernels(2, 1);
        let stats = random_stats(&mut rng, &ks, &z, 30);
        let q = DVector::from_vec(vec![0.05, 0.1]);
        let qu = optimal_qu(&stats, &ks, &z, &q).unwrap();
        for (d, (gm, gs)) in qu_moment_gradient(&stats, &qu, &ks, &z, &q).unwrap().into_iter().enumerate() {
            assert!(gm.norm() < 1e-5, "mean gradient {}", gm.norm());
            // gradient with respect to the covariance factor
            let gl = crate::linalg::sym(&gs) * qu.cov_factor(d) * 2.0;
            assert!(gl.norm() < 1e-5, "factor gradient {}", gl.norm());
        }
    }

    #[test]
    fn optimal_qu_without_transitions_is_prior() {
        let z = InducingSet::covering(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0), 4).unwrap();
        let ks = kernels(1, 1);
        let stats = TransitionStats { dims: vec![DimStats::zeros(4)] };
        let qu = optimal_qu(&stats, &ks, &z, &DVector::from_element(1, 0.1)).unwrap();
        let prior = SparseGpPosterior::prior(&ks, &z).unwrap();
        assert!(qu.mean(0).amax() < 1e-14);
        assert!((qu.covariance(0) - prior.covariance(0)).amax() < 1e-10);
    }

    #[test]
    fn optimal_qu_single_point_matches_gp_regression() {
        // one transition with a deterministic input: GP regression with a single
        // observation y at x and noise Q
        let z = InducingSet::covering(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0), 3).unwrap();
        let k = ArdRbfKernel::new(1.2, DVector::from_element(1, 0.7)).unwrap();
        let (x, y, q) = (0.3, 0.8, 0.05);
        let kx = k.kvec(&DVector::from_element(1, x), z.z());
        let stats = TransitionStats {
            dims: vec![DimStats { count: 1, target_sq: y * y, cross: &kx * y, psi2: &kx * kx.transpose() }],
        };
        let qu = optimal_qu(&stats, std::slice::from_ref(&k), &z, &DVector::from_element(1, q)).unwrap();
        // p(u | y) with y = g(x) + ε: regression of u on one noisy datum
        let kzz = k.gram_jittered(z.z());
        let kxx = k.variance();
        let kinv = kzz.clone().try_inverse().unwrap();
        // y | u ~ N(kxᵀK⁻¹u, kxx - kxᵀK⁻¹kx + q) is the exact model; the variational
        // optimum uses the Titsias form which drops the conditional variance from
        // the noise, i.e. y | u ~ N(kxᵀK⁻¹u, q)
        let _ = kxx;
        let h = &kinv * &kx;
        let post_prec = &kinv + &h * h.transpose() / q;
        let post_cov = post_prec.clone().try_inverse().unwrap();
        let post_mean = &post_cov * &h * (y / q);
        assert!((qu.mean(0) - post_mean).amax() < 1e-8);
        assert!((qu.covariance(0) - post_cov).amax() < 1e-8);
    }
}
