//! The evidence lower bound and its gradient.
//!
//! ```text
//! L = Σ_t E_q(x_t)[log p(y_t | x_t)]
//!   + Σ_t E_q(x_{t-1:t}) q(f)[log p(x_t | x_{t-1}, f)]
//!   + E_q(x_0)[log p(x_0)] + H[q(x)] - KL[q(u) ‖ p(u)]
//! ```
//!
//! The transition term only touches `q(x)` through three per-dimension sums of
//! Ψ-statistics (see [`TransitionStats`]), which makes the optimal `q(u)`
//! available in closed form. The default objective plugs that optimum back in
//! ("collapsed" bound); the fixed mode evaluates the bound for a given `q(u)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::kernel::{
    gram_backward, psi1_forward, psi2_backward, psi2_forward, weighted_psi1, weighted_psi1_backward,
    ArdRbfKernel, Psi2Cache, PsiGrads,
};
use crate::linalg::{cholesky_jitter, frob, inverse_from_factor, sym};
use crate::markov::{ChainGradient, ChainMarginals, GaussMarkovChain, MarginalGrads};
use crate::model::{EmissionModel, GpssmModel, Sequence};
use crate::sparse_gp::{optimal_qu, optimal_qu_parts, prior_kl, DimStats, SparseGpPosterior, TransitionGp, TransitionStats};

/// The five terms of the bound and their sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElboTerms {
    pub emission: f64,
    pub transition: f64,
    pub prior: f64,
    pub entropy: f64,
    pub kl_u: f64,
    pub total: f64,
}

impl ElboTerms {
    fn check(self) -> Result<Self> {
        for (name, v) in [
            ("emission", self.emission),
            ("transition", self.transition),
            ("prior", self.prior),
            ("entropy", self.entropy),
            ("kl_u", self.kl_u),
        ] {
            if !v.is_finite() {
                return Err(GpssmError::Numerical {
                    term: name.into(),
                    detail: format!("value {v}; terms {self:?}"),
                });
            }
        }
        Ok(self)
    }
}

/// How `q(u)` enters the bound.
#[derive(Debug, Clone, Copy)]
pub enum QuMode<'a> {
    /// Optimal `q(u)` for the current `q(x)` and hyperparameters.
    Collapsed,
    /// A given `q(u)`; hyperparameter gradients are not available in this mode.
    Fixed(&'a SparseGpPosterior),
}

/// Gradient of the bound with respect to every model parameter, in the
/// unconstrained coordinates used by the optimizer (logs for positive values).
#[derive(Debug, Clone)]
pub struct ModelGradient {
    pub kernel_log_variance: Vec<f64>,
    pub kernel_log_lengthscales: Vec<DVector<f64>>,
    pub inducing: DMatrix<f64>,
    pub log_process_noise: DVector<f64>,
    pub emission_c: DMatrix<f64>,
    pub emission_offset: DVector<f64>,
    pub log_emission_noise: DVector<f64>,
    pub(crate) chain: ChainGradient,
}

/// `Σ_t E_q(x_t)[log N(y_t | C x_t + d, R)]`, skipping missing (`NaN`) entries.
pub fn emission_expectation(marg: &ChainMarginals, emission: &EmissionModel, y: &DMatrix<f64>) -> f64 {
    emission_term(marg, emission, y, None)
}

struct EmissionGrads<'a> {
    marg: &'a mut MarginalGrads,
    c: DMatrix<f64>,
    offset: DVector<f64>,
    log_r: DVector<f64>,
}

fn emission_term(
    marg: &ChainMarginals,
    emission: &EmissionModel,
    y: &DMatrix<f64>,
    mut grads: Option<&mut EmissionGrads>,
) -> f64 {
    let c = emission.c();
    let r = emission.noise_var();
    let mut total = 0.0;
    for t in 1..marg.len() {
        let (m, s) = (&marg.means[t], &marg.covs[t]);
        for i in 0..emission.obs_dim() {
            let yi = y[(t - 1, i)];
            if yi.is_nan() {
                continue;
            }
            let ci = c.row(i).transpose();
            let resid = yi - ci.dot(m) - emission.offset()[i];
            let sc = s * &ci;
            let quad = ci.dot(&sc);
            total += -0.5 * (2.0 * PI * r[i]).ln() - 0.5 * (resid * resid + quad) / r[i];
            if let Some(g) = grads.as_deref_mut() {
                g.marg.means[t] += &ci * (resid / r[i]);
                g.marg.covs[t] -= &ci * ci.transpose() * (0.5 / r[i]);
                let gc = (m * resid - &sc) / r[i];
                for j in 0..c.ncols() {
                    g.c[(i, j)] += gc[j];
                }
                g.offset[i] += resid / r[i];
                g.log_r[i] += -0.5 + 0.5 * (resid * resid + quad) / r[i];
            }
        }
    }
    total
}

/// `E_q(x_0)[log p(x_0)]`.
pub fn prior_expectation(q_x0: &GaussianDist, state_prior: &GaussianDist) -> f64 {
    let d = q_x0.dim() as f64;
    let pinv = inverse_from_factor(state_prior.cov_factor());
    let diff = q_x0.mean() - state_prior.mean();
    -0.5 * (d * (2.0 * PI).ln()
        + state_prior.log_det_cov()
        + frob(&pinv, &q_x0.covariance())
        + diff.dot(&(&pinv * &diff)))
}

/// Per-step transition geometry shared by the bound and the forecasting objective.
pub(crate) struct TransitionContext<'a> {
    pub kernels: &'a [ArdRbfKernel],
    pub z: &'a DMatrix<f64>,
    pub phi: f64,
    /// Row `t - 1` is used on step `t`.
    pub controls: Option<&'a DMatrix<f64>>,
    caches: Vec<Psi2Cache>,
    lams: Vec<DVector<f64>>,
}

/// Weights of the transition term with respect to one dimension's statistics.
#[derive(Debug, Clone)]
pub(crate) struct DimWeights {
    pub g_psi2: DMatrix<f64>,
    pub g_cross: DVector<f64>,
    pub g_target_sq: f64,
}

impl<'a> TransitionContext<'a> {
    pub fn new(
        kernels: &'a [ArdRbfKernel],
        z: &'a DMatrix<f64>,
        phi: f64,
        controls: Option<&'a DMatrix<f64>>,
    ) -> Self {
        let caches = kernels.iter().map(|k| Psi2Cache::new(k, z)).collect();
        let lams = kernels.iter().map(|k| k.lambda()).collect();
        Self { kernels, z, phi, controls, caches, lams }
    }

    fn state_dim(&self) -> usize {
        self.kernels.len()
    }

    fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Moments of the GP input `x̃_{t-1} = (x_{t-1}, u_t)`.
    fn step_input(&self, marg: &ChainMarginals, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let din = self.input_dim();
        let mut mean = DVector::zeros(din);
        mean.rows_mut(0, d).copy_from(&marg.means[t - 1]);
        if let Some(u) = self.controls {
            for j in 0..din - d {
                mean[d + j] = u[(t - 1, j)];
            }
        }
        (mean, crate::linalg::pad_zero(&marg.covs[t - 1], din - d))
    }

    /// Moments of the regression target `a_t = x_t - φ x_{t-1}`:
    /// mean, per-dimension variance, and `Cov(x̃_{t-1}, a_t)`.
    fn step_target(&self, marg: &ChainMarginals, t: usize) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let phi = self.phi;
        let (sp, sn, v) = (&marg.covs[t - 1], &marg.covs[t], &marg.cross[t - 1]);
        let ma = &marg.means[t] - &marg.means[t - 1] * phi;
        let va = DVector::from_fn(d, |i, _| sn[(i, i)] + phi * phi * sp[(i, i)] - 2.0 * phi * v[(i, i)]);
        let mut w = DMatrix::zeros(self.input_dim(), d);
        w.view_mut((0, 0), (d, d)).copy_from(&(v - sp * phi));
        (ma, va, w)
    }

    /// Sums of the statistics over steps `1..=T`.
    pub fn forward(&self, marg: &ChainMarginals) -> Result<TransitionStats> {
        let m = self.z.nrows();
        let mut dims: Vec<DimStats> = self.kernels.iter().map(|_| DimStats::zeros(m)).collect();
        for t in 1..marg.len() {
            let (mean_in, cov_in) = self.step_input(marg, t);
            let (ma, va, w) = self.step_target(marg, t);
            for (d, k) in self.kernels.iter().enumerate() {
                let p1 = psi1_forward(k, &mean_in, &cov_in, self.z)?;
                let st = &mut dims[d];
                st.cross += weighted_psi1(&p1, ma[d], &w.column(d).into_owned());
                st.psi2 += psi2_forward(k, &self.caches[d], &mean_in, &cov_in, self.z)?.psi2;
                st.target_sq += ma[d] * ma[d] + va[d];
                st.count += 1;
            }
        }
        Ok(TransitionStats { dims })
    }

    /// Pushes statistic weights back onto the marginals (and, when given, onto
    /// kernel parameters and inducing inputs).
    pub fn backward(
        &self,
        marg: &ChainMarginals,
        weights: &[DimWeights],
        g: &mut MarginalGrads,
        mut kernel_acc: Option<&mut [PsiGrads]>,
    ) -> Result<()> {
        let d_state = self.state_dim();
        let din = self.input_dim();
        let m = self.z.nrows();
        let phi = self.phi;
        let mut scratch: Vec<PsiGrads> = (0..d_state).map(|_| PsiGrads::zeros(din, m)).collect();
        for t in 1..marg.len() {
            let (mean_in, cov_in) = self.step_input(marg, t);
            let (ma, _, w) = self.step_target(marg, t);
            let mut g_ma = DVector::<f64>::zeros(d_state);
            let mut g_va = DVector::<f64>::zeros(d_state);
            let mut g_w = DMatrix::zeros(din, d_state);
            let mut g_mean_in = DVector::zeros(din);
            let mut g_cov_in = DMatrix::zeros(din, din);
            for (d, k) in self.kernels.iter().enumerate() {
                let wt = &weights[d];
                let acc = match kernel_acc.as_deref_mut() {
                    Some(a) => &mut a[d],
                    None => &mut scratch[d],
                };
                acc.mean.fill(0.0);
                acc.cov.fill(0.0);
                let lam = &self.lams[d];
                let p1 = psi1_forward(k, &mean_in, &cov_in, self.z)?;
                let wcol = w.column(d).into_owned();
                let (gm, gw) = weighted_psi1_backward(&p1, ma[d], &wcol, &wt.g_cross, self.z, lam, acc);
                let p2 = psi2_forward(k, &self.caches[d], &mean_in, &cov_in, self.z)?;
                psi2_backward(&p2, &wt.g_psi2, &mean_in, self.z, lam, acc);
                g_ma[d] += gm + 2.0 * ma[d] * wt.g_target_sq;
                g_va[d] += wt.g_target_sq;
                g_w.set_column(d, &gw);
                g_mean_in += &acc.mean;
                g_cov_in += &acc.cov;
            }
            // map back onto the chain marginals
            g.means[t] += &g_ma;
            g.means[t - 1] -= &g_ma * phi;
            g.means[t - 1] += g_mean_in.rows(0, d_state);
            g.covs[t - 1] += g_cov_in.view((0, 0), (d_state, d_state));
            let g_wtop = g_w.view((0, 0), (d_state, d_state)).into_owned();
            g.cross[t - 1] += &g_wtop;
            g.covs[t - 1] -= g_wtop * phi;
            for i in 0..d_state {
                g.covs[t][(i, i)] += g_va[i];
                g.covs[t - 1][(i, i)] += phi * phi * g_va[i];
                g.cross[t - 1][(i, i)] -= 2.0 * phi * g_va[i];
            }
        }
        Ok(())
    }
}

/// Collapsed contribution of one output dimension and its gradients.
struct CollapsedDim {
    value: f64,
    weights: DimWeights,
    g_kzz: DMatrix<f64>,
    kzz: DMatrix<f64>,
    g_log_q: f64,
    g_log_var_direct: f64,
}

fn collapsed_dim(stats: &DimStats, k: &ArdRbfKernel, z: &crate::sparse_gp::InducingSet, q: f64) -> Result<CollapsedDim> {
    let n = stats.count as f64;
    let var = k.variance();
    let parts = optimal_qu_parts(stats, k, z, q)?;
    let m = parts.kzz.nrows();
    let l = &parts.l;
    let phi = &stats.psi2;
    let phi_w = &parts.phi_w;
    let binv = parts.b_chol.inverse();
    let eye = DMatrix::<f64>::identity(m, m);
    // L⁻ᵀ X L⁻¹
    let unwhiten = |x: &DMatrix<f64>| {
        let half = l.transpose().solve_upper_triangular(x).expect("triangular factor");
        sym(&l.transpose().solve_upper_triangular(&half.transpose()).expect("triangular factor"))
    };
    let binv_cw = parts.b_chol.solve(&parts.cross_w);
    // β = A⁻¹ c with A = K + Φ/Q
    let beta = l.transpose().solve_upper_triangular(&binv_cw).expect("triangular factor");
    let tr_kphi = phi_w.trace();
    let logdet_b = 2.0 * parts.b_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let c_beta = parts.cross_w.dot(&binv_cw);
    let resid = stats.target_sq + n * var - tr_kphi;
    let value = -0.5 * n * (2.0 * PI * q).ln() - resid / (2.0 * q) - 0.5 * logdet_b + 0.5 * c_beta / (q * q);
    let bbt = &beta * beta.transpose();
    let k_minus_a = unwhiten(&(&eye - &binv));
    let g_psi2 = &k_minus_a / (2.0 * q) - &bbt / (2.0 * q * q * q);
    let g_kzz = unwhiten(&(phi_w / (-2.0 * q))) + &k_minus_a * 0.5 - &bbt / (2.0 * q * q);
    let b_phi_b = beta.dot(&(phi * &beta));
    let g_q = -0.5 * n / q + resid / (2.0 * q * q) + frob(&binv, phi_w) / (2.0 * q * q)
        + b_phi_b / (2.0 * q.powi(4))
        - c_beta / q.powi(3);
    Ok(CollapsedDim {
        value,
        weights: DimWeights { g_psi2: sym(&g_psi2), g_cross: &beta / (q * q), g_target_sq: -0.5 / q },
        g_kzz,
        kzz: parts.kzz,
        g_log_q: g_q * q,
        g_log_var_direct: -n * var / (2.0 * q),
    })
}

/// Transition term for a given `q(u)` from accumulated statistics.
pub(crate) fn fixed_dim(stats: &DimStats, gp: &TransitionGp, d: usize, q: f64) -> (f64, DimWeights) {
    let n = stats.count as f64;
    let alpha = gp.alpha(d);
    let var = gp.kernels()[d].variance();
    let w2 = alpha * alpha.transpose() - gp.var_reduction(d);
    let value = -0.5 * n * (2.0 * PI * q).ln()
        - (stats.target_sq - 2.0 * alpha.dot(&stats.cross) + frob(&w2, &stats.psi2) + n * var) / (2.0 * q);
    (
        value,
        DimWeights { g_psi2: sym(&(-w2 / (2.0 * q))), g_cross: alpha / q, g_target_sq: -0.5 / q },
    )
}

/// The expected transition log-density `Σ_t E[log p(x_t | x_{t-1}, f)]` under a given `q(u)`.
pub fn transition_expectation(model: &GpssmModel, seq: &Sequence, q_u: &SparseGpPosterior) -> Result<f64> {
    model.validate()?;
    model.check_sequence(seq)?;
    let marg = model.q_x.marginals();
    let stats = transition_stats(model, seq, &marg)?;
    let gp = TransitionGp::new(model.kernels.clone(), model.inducing.clone(), q_u.clone(), model.mean_fn)?;
    Ok((0..model.state_dim())
        .map(|d| fixed_dim(&stats.dims[d], &gp, d, model.process_noise[d]).0)
        .sum())
}

/// Accumulated Ψ-statistics of the model's `q(x)` on a sequence.
pub fn transition_stats(model: &GpssmModel, seq: &Sequence, marg: &ChainMarginals) -> Result<TransitionStats> {
    let ctx = TransitionContext::new(&model.kernels, model.inducing.z(), model.mean_fn.weight(), seq.controls());
    ctx.forward(marg)
}

/// The bound with the collapsed (optimal) `q(u)`.
pub fn elbo(model: &GpssmModel, seq: &Sequence) -> Result<ElboTerms> {
    Ok(evaluate(model, seq, QuMode::Collapsed, false)?.0)
}

/// The bound for an explicit choice of `q(u)` handling.
pub fn elbo_with(model: &GpssmModel, seq: &Sequence, mode: QuMode) -> Result<ElboTerms> {
    Ok(evaluate(model, seq, mode, false)?.0)
}

/// Bound and full gradient (collapsed `q(u)`).
pub fn elbo_gradient(model: &GpssmModel, seq: &Sequence) -> Result<(ElboTerms, ModelGradient)> {
    let (terms, g) = evaluate(model, seq, QuMode::Collapsed, true)?;
    Ok((terms, g.expect("gradient requested")))
}

/// Bound and gradient for a given mode. With [`QuMode::Fixed`] only the
/// `q(x)` and emission parts of the gradient are populated.
pub fn elbo_gradient_with(model: &GpssmModel, seq: &Sequence, mode: QuMode) -> Result<(ElboTerms, ModelGradient)> {
    let (terms, g) = evaluate(model, seq, mode, true)?;
    Ok((terms, g.expect("gradient requested")))
}

/// Optimal `q(u)` for the model's current `q(x)` and hyperparameters.
pub fn collapsed_qu(model: &GpssmModel, seq: &Sequence) -> Result<SparseGpPosterior> {
    model.check_sequence(seq)?;
    let marg = model.q_x.marginals();
    let stats = transition_stats(model, seq, &marg)?;
    optimal_qu(&stats, &model.kernels, &model.inducing, &model.process_noise)
}

pub(crate) fn evaluate(
    model: &GpssmModel,
    seq: &Sequence,
    mode: QuMode,
    want_grad: bool,
) -> Result<(ElboTerms, Option<ModelGradient>)> {
    model.validate()?;
    model.check_sequence(seq)?;
    let d_state = model.state_dim();
    let din = model.input_dim();
    let m = model.inducing.len();
    let marg = model.q_x.marginals();
    let mut mg = MarginalGrads::zeros(marg.len(), d_state);

    let mut em_grads = EmissionGrads {
        marg: &mut mg,
        c: DMatrix::zeros(model.obs_dim(), d_state),
        offset: DVector::zeros(model.obs_dim()),
        log_r: DVector::zeros(model.obs_dim()),
    };
    let emission = emission_term(
        &marg,
        &model.emission,
        seq.observations(),
        if want_grad { Some(&mut em_grads) } else { None },
    );
    let EmissionGrads { c: g_c, offset: g_off, log_r: g_log_r, .. } = em_grads;

    let q_x0 = model.q_x.initial();
    let prior = prior_expectation(q_x0, &model.state_prior);
    if want_grad {
        let pinv = inverse_from_factor(model.state_prior.cov_factor());
        mg.means[0] -= &pinv * (q_x0.mean() - model.state_prior.mean());
        mg.covs[0] -= pinv * 0.5;
    }
    let entropy = model.q_x.entropy();

    let ctx = TransitionContext::new(&model.kernels, model.inducing.z(), model.mean_fn.weight(), seq.controls());
    let stats = ctx.forward(&marg)?;

    let mut weights = Vec::with_capacity(d_state);
    let mut transition = 0.0;
    let kl_u;
    let mut kernel_acc: Vec<PsiGrads> = (0..d_state).map(|_| PsiGrads::zeros(din, m)).collect();
    let mut g_log_q = DVector::zeros(d_state);
    let hyper_grads = want_grad && matches!(mode, QuMode::Collapsed);
    match mode {
        QuMode::Collapsed => {
            let mut collapsed_total = 0.0;
            for d in 0..d_state {
                let cd = collapsed_dim(&stats.dims[d], &model.kernels[d], &model.inducing, model.process_noise[d])?;
                collapsed_total += cd.value;
                if want_grad {
                    gram_backward(&model.kernels[d], &cd.kzz, &cd.g_kzz, model.inducing.z(), &mut kernel_acc[d]);
                    kernel_acc[d].log_var += cd.g_log_var_direct;
                    g_log_q[d] = cd.g_log_q;
                }
                weights.push(cd.weights);
            }
            // split the collapsed value into its explicit transition and KL parts
            let qu = optimal_qu(&stats, &model.kernels, &model.inducing, &model.process_noise)?;
            kl_u = prior_kl(&qu, &model.inducing, &model.kernels)?;
            transition = collapsed_total + kl_u;
        }
        QuMode::Fixed(q_u) => {
            let gp = TransitionGp::new(model.kernels.clone(), model.inducing.clone(), q_u.clone(), model.mean_fn)?;
            for d in 0..d_state {
                let (v, w) = fixed_dim(&stats.dims[d], &gp, d, model.process_noise[d]);
                transition += v;
                weights.push(w);
            }
            kl_u = prior_kl(q_u, &model.inducing, &model.kernels)?;
        }
    }

    let total = emission + transition + prior + entropy - kl_u;
    let terms = ElboTerms { emission, transition, prior, entropy, kl_u, total }.check()?;
    if !want_grad {
        return Ok((terms, None));
    }

    ctx.backward(&marg, &weights, &mut mg, if hyper_grads { Some(&mut kernel_acc) } else { None })?;
    let mut chain = model.q_x.backward(&marg, mg);
    add_entropy_gradient(&model.q_x, &mut chain);

    let mut inducing = DMatrix::zeros(m, din);
    let mut kernel_log_variance = vec![0.0; d_state];
    let mut kernel_log_lengthscales = vec![DVector::zeros(din); d_state];
    if hyper_grads {
        for d in 0..d_state {
            inducing += &kernel_acc[d].z;
            kernel_log_variance[d] = kernel_acc[d].log_var;
            kernel_log_lengthscales[d] = kernel_acc[d].log_lengthscales(&model.kernels[d]);
        }
    }
    let grad = ModelGradient {
        kernel_log_variance,
        kernel_log_lengthscales,
        inducing,
        log_process_noise: g_log_q,
        emission_c: g_c,
        emission_offset: g_off,
        log_emission_noise: g_log_r,
        chain,
    };
    Ok((terms, Some(grad)))
}

/// Adds `∂H/∂L` for every conditional and the initial factor.
pub(crate) fn add_entropy_gradient(chain: &GaussMarkovChain, g: &mut ChainGradient) {
    let l0 = chain.initial().cov_factor();
    for i in 0..l0.nrows() {
        g.initial_factor[(i, i)] += 1.0 / l0[(i, i)];
    }
    for (s, gl) in chain.steps().iter().zip(g.cond_factors.iter_mut()) {
        let l = s.cond_factor();
        for i in 0..l.nrows() {
            gl[(i, i)] += 1.0 / l[(i, i)];
        }
    }
}

/// `K_zz` Cholesky sanity check used by diagnostics.
pub fn kzz_condition_ok(model: &GpssmModel) -> bool {
    model
        .kernels
        .iter()
        .all(|k| cholesky_jitter(&k.gram_jittered(model.inducing.z()), 0.0, "K_zz").is_ok())
}
