//! Filtering, multi-step forecasting, and the prediction-gap diagnostic.
//!
//! Forecasts start from a Gaussian over the last filtered state `x_T` and run
//! `P` steps ahead. Three methods are available: sampled trajectories (exact
//! up to Monte-Carlo error), moment matching, and variational prediction, which
//! extends `q(x)` with affine-Gaussian steps `q(x_p | x_{p-1})` chosen to
//! maximize the augmented bound `L' = L + Σ_p E[log p(x_p | f, x_{p-1}) - log q(x_p | x_{p-1})]`.
//! The deficit `Δ = L - L'` is the expected KL between the variational and the
//! model's predictive distribution over the forecast path.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::elbo::{add_entropy_gradient, elbo_gradient_with, elbo_with, fixed_dim, ElboTerms, QuMode, TransitionContext};
use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::linalg::{lower_solve_vec, psd_factor, sym};
use crate::markov::{AffineStep, GaussMarkovChain, MarginalGrads};
use crate::model::{EmissionModel, GpssmModel, Sequence};
use crate::optim::{maximize, LbfgsConfig};
use crate::params::{pack, pack_chain, pack_chain_gradient, pack_gradient, unpack, unpack_chain, ChainMask, ParamMask};
use crate::sparse_gp::TransitionGp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForecastMethod {
    Sample,
    MomentMatch,
    Variational,
}

impl ForecastMethod {
    pub fn tag(self) -> &'static str {
        match self {
            ForecastMethod::Sample => "sample",
            ForecastMethod::MomentMatch => "mm",
            ForecastMethod::Variational => "variational",
        }
    }
}

impl fmt::Display for ForecastMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ForecastMethod {
    type Err = GpssmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sample" => Ok(ForecastMethod::Sample),
            "mm" => Ok(ForecastMethod::MomentMatch),
            "variational" => Ok(ForecastMethod::Variational),
            other => Err(GpssmError::InvalidParameter(format!(
                "unknown forecast method {other:?} (expected sample, mm or variational)"
            ))),
        }
    }
}

/// Per-step state and observation moments for steps `1..=P`.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub method: ForecastMethod,
    pub state_means: Vec<DVector<f64>>,
    pub state_covs: Vec<DMatrix<f64>>,
    pub obs_means: Vec<DVector<f64>>,
    pub obs_covs: Vec<DMatrix<f64>>,
}

impl ForecastResult {
    fn from_states(
        method: ForecastMethod,
        emission: &EmissionModel,
        state_means: Vec<DVector<f64>>,
        state_covs: Vec<DMatrix<f64>>,
    ) -> Self {
        let (obs_means, obs_covs) = state_means
            .iter()
            .zip(&state_covs)
            .map(|(m, s)| emission.push_forward(m, s))
            .unzip();
        Self { method, state_means, state_covs, obs_means, obs_covs }
    }

    pub fn horizon(&self) -> usize {
        self.state_means.len()
    }
}

fn check_forecast_inputs(
    model: &GpssmModel,
    start: &GaussianDist,
    horizon: usize,
    controls: Option<&DMatrix<f64>>,
) -> Result<()> {
    if start.dim() != model.state_dim() {
        return Err(GpssmError::DimensionMismatch(format!(
            "start distribution has dimension {}, model state dimension is {}",
            start.dim(),
            model.state_dim()
        )));
    }
    match (controls, model.control_dim) {
        (None, 0) => Ok(()),
        (Some(u), du) if u.ncols() == du && u.nrows() >= horizon => Ok(()),
        (None, du) if horizon == 0 => {
            let _ = du;
            Ok(())
        }
        _ => Err(GpssmError::DimensionMismatch(format!(
            "forecast needs {} control columns over {horizon} rows",
            model.control_dim
        ))),
    }
}

fn gp_input(x: &DVector<f64>, controls: Option<&DMatrix<f64>>, row: usize) -> DVector<f64> {
    match controls {
        None => x.clone(),
        Some(u) => DVector::from_iterator(x.len() + u.ncols(), x.iter().copied().chain(u.row(row).iter().copied())),
    }
}

fn add_noise(z: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut (impl Rng + ?Sized)) -> DVector<f64> {
    let eps = DVector::from_fn(z.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    z + factor * eps
}

/// Sampled state and observation trajectories with their empirical moments.
#[derive(Debug, Clone)]
pub struct SampledForecast {
    /// `states[n][p - 1]` is `x_{T+p}` of trajectory `n`.
    pub states: Vec<Vec<DVector<f64>>>,
    pub observations: Vec<Vec<DVector<f64>>>,
    pub summary: ForecastResult,
}

/// Draws `x_T` from `start`, a function path from `q(f)`, then
/// `x_{T+p} ~ N(f(x_{T+p-1}), Q)` and `y ~ p(y | x)`, independently per trajectory.
pub fn sample_forecast<R: Rng + ?Sized>(
    model: &GpssmModel,
    start: &GaussianDist,
    horizon: usize,
    controls: Option<&DMatrix<f64>>,
    n_traj: usize,
    rng: &mut R,
) -> Result<SampledForecast> {
    check_forecast_inputs(model, start, horizon, controls)?;
    if n_traj == 0 {
        return Err(GpssmError::InvalidParameter("need at least one trajectory".into()));
    }
    let gp = model.transition_gp()?;
    let d = model.state_dim();
    let q_sd = model.process_noise.map(f64::sqrt);
    let r_sd = model.emission.noise_var().map(f64::sqrt);
    let mut states = Vec::with_capacity(n_traj);
    let mut observations = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut x = start.sample(rng);
        let mut sampler = gp.sample_function_path(rng);
        let mut xs = Vec::with_capacity(horizon);
        let mut ys = Vec::with_capacity(horizon);
        for p in 0..horizon {
            let f = sampler.next(&gp_input(&x, controls, p))?;
            x = DVector::from_fn(d, |i, _| f[i] + q_sd[i] * rng.sample::<f64, _>(StandardNormal));
            let clean = model.emission.c() * &x + model.emission.offset();
            let y = DVector::from_fn(clean.len(), |i, _| clean[i] + r_sd[i] * rng.sample::<f64, _>(StandardNormal));
            xs.push(x.clone());
            ys.push(y);
        }
        states.push(xs);
        observations.push(ys);
    }
    let n = n_traj as f64;
    let mut means = Vec::with_capacity(horizon);
    let mut covs = Vec::with_capacity(horizon);
    for p in 0..horizon {
        let mean = states.iter().fold(DVector::zeros(d), |acc, s| acc + &s[p]) / n;
        let mut cov = DMatrix::zeros(d, d);
        for s in &states {
            let e = &s[p] - &mean;
            cov += &e * e.transpose();
        }
        covs.push(cov / (n - 1.0).max(1.0));
        means.push(mean);
    }
    let summary = ForecastResult::from_states(ForecastMethod::Sample, &model.emission, means, covs);
    Ok(SampledForecast { states, observations, summary })
}

pub(crate) struct MomentSteps {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(x_{p-1}, x_p)`
    pub cross: Vec<DMatrix<f64>>,
}

fn moment_steps(
    gp: &TransitionGp,
    q: &DVector<f64>,
    start: &GaussianDist,
    horizon: usize,
    controls: Option<&DMatrix<f64>>,
    full_cov: bool,
) -> Result<MomentSteps> {
    let d = start.dim();
    let din = gp.input_dim();
    let mut mean = start.mean().clone();
    let mut cov = start.covariance();
    let mut out = MomentSteps { means: Vec::new(), covs: Vec::new(), cross: Vec::new() };
    for p in 0..horizon {
        let mean_in = gp_input(&mean, controls, p);
        let cov_in = crate::linalg::pad_zero(&cov, din - d);
        let mm = gp.moments_from_raw(&mean_in, &cov_in, full_cov)?;
        let mut next = mm.cov.clone();
        for i in 0..d {
            next[(i, i)] += q[i];
        }
        psd_factor(&next, "moment-matched covariance")?;
        out.cross.push(mm.input_cross.rows(0, d).into_owned());
        mean = mm.mean;
        cov = sym(&next);
        out.means.push(mean.clone());
        out.covs.push(cov.clone());
    }
    Ok(out)
}

/// Propagates a Gaussian through the transition by matching the exact mean and
/// covariance at every step. `full_cov = false` drops cross-output terms of the GP.
pub fn moment_match_forecast(
    model: &GpssmModel,
    start: &GaussianDist,
    horizon: usize,
    controls: Option<&DMatrix<f64>>,
    full_cov: bool,
) -> Result<ForecastResult> {
    check_forecast_inputs(model, start, horizon, controls)?;
    let gp = model.transition_gp()?;
    let s = moment_steps(&gp, &model.process_noise, start, horizon, controls, full_cov)?;
    Ok(ForecastResult::from_states(ForecastMethod::MomentMatch, &model.emission, s.means, s.covs))
}

/// Affine-Gaussian continuation `q(x_p | x_{p-1})` for `p = T+1..T+P`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedChain {
    pub steps: Vec<AffineStep>,
}

impl AugmentedChain {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Appends the continuation to a trained chain.
    pub fn compose(&self, q_x: &GaussMarkovChain) -> Result<GaussMarkovChain> {
        let mut steps = q_x.steps().to_vec();
        steps.extend(self.steps.iter().cloned());
        GaussMarkovChain::new(q_x.initial().clone(), steps)
    }

    fn chain_from(&self, start: &GaussianDist) -> Result<GaussMarkovChain> {
        GaussMarkovChain::new(start.clone(), self.steps.clone())
    }

    /// Converts moment-matched joint moments into affine conditionals.
    fn from_moments(start: &GaussianDist, steps: &MomentSteps) -> Result<Self> {
        let d = start.dim();
        let mut prev_mean = start.mean().clone();
        let mut prev_cov = start.covariance();
        let mut out = Vec::with_capacity(steps.means.len());
        for p in 0..steps.means.len() {
            let ridge = 1e-10 * (1.0 + prev_cov.trace() / d as f64);
            let reg = &prev_cov + DMatrix::identity(d, d) * ridge;
            let ch = crate::linalg::cholesky_jitter(&reg, 0.0, "forecast state covariance")?.0;
            let a = ch.solve(&steps.cross[p]).transpose();
            let b = &steps.means[p] - &a * &prev_mean;
            let resid = &steps.covs[p] - &a * &prev_cov * a.transpose();
            let l = psd_factor(&resid, "forecast conditional covariance")?;
            out.push(AffineStep::new_clamped(a, b, l)?);
            prev_mean = steps.means[p].clone();
            prev_cov = steps.covs[p].clone();
        }
        Ok(Self { steps: out })
    }
}

/// `Σ_p E[log p(x_p | f, x_{p-1})] + H[q(x_p | x_{p-1})]` and optionally its
/// gradient over the continuation parameters.
fn augmentation(
    gp: &TransitionGp,
    q: &DVector<f64>,
    chain: &GaussMarkovChain,
    controls: Option<&DMatrix<f64>>,
    want_grad: bool,
) -> Result<(f64, Option<DVector<f64>>)> {
    if chain.is_empty() {
        return Ok((0.0, want_grad.then(|| DVector::zeros(0))));
    }
    let marg = chain.marginals();
    let ctx = TransitionContext::new(gp.kernels(), gp.inducing().z(), gp.mean_fn().weight(), controls);
    let stats = ctx.forward(&marg)?;
    let mut value: f64 = chain.steps().iter().map(AffineStep::conditional_entropy).sum();
    let mut weights = Vec::with_capacity(q.len());
    for d in 0..q.len() {
        let (v, w) = fixed_dim(&stats.dims[d], gp, d, q[d]);
        value += v;
        weights.push(w);
    }
    if !value.is_finite() {
        return Err(GpssmError::Numerical { term: "forecast transition".into(), detail: format!("value {value}") });
    }
    if !want_grad {
        return Ok((value, None));
    }
    let mut mg = MarginalGrads::zeros(marg.len(), chain.dim());
    ctx.backward(&marg, &weights, &mut mg, None)?;
    let mut g = chain.backward(&marg, mg);
    add_entropy_gradient(chain, &mut g);
    let mut out = Vec::new();
    pack_chain_gradient(chain, &g, ChainMask { initial: false, first_step: 0 }, &mut out);
    Ok((value, Some(DVector::from_vec(out))))
}

/// Outcome of variational prediction.
#[derive(Debug, Clone)]
pub struct VariationalForecast {
    pub chain: AugmentedChain,
    pub forecast: ForecastResult,
    /// `L' - L`; never positive.
    pub augmentation: f64,
    /// `Δ = L - L'`
    pub gap: f64,
    /// `Δ / P` (zero for `P = 0`).
    pub gap_per_step: f64,
    pub iterations: usize,
    /// Set when optimization failed and the moment-matching initialization was kept.
    pub fell_back: bool,
}

/// Maximizes the augmented bound over the continuation with every trained
/// parameter, including `q(u)` and the starting marginal, frozen.
pub fn variational_forecast(
    model: &GpssmModel,
    start: &GaussianDist,
    horizon: usize,
    controls: Option<&DMatrix<f64>>,
    cfg: &LbfgsConfig,
) -> Result<VariationalForecast> {
    check_forecast_inputs(model, start, horizon, controls)?;
    let gp = model.transition_gp()?;
    let q = &model.process_noise;
    let mm = moment_steps(&gp, q, start, horizon, controls, true)?;
    let init = AugmentedChain::from_moments(start, &mm)?;
    let template = init.chain_from(start)?;
    let mask = ChainMask { initial: false, first_step: 0 };
    let mut theta0 = Vec::new();
    pack_chain(&template, mask, &mut theta0);
    let objective = |theta: &DVector<f64>| {
        let chain = unpack_chain(&template, mask, theta.as_slice())?;
        let (v, g) = augmentation(&gp, q, &chain, controls, true)?;
        Ok((v, g.expect("gradient requested"), ()))
    };
    let (chain, iterations, fell_back) = match maximize(objective, DVector::from_vec(theta0), cfg, |_, _| {}) {
        Ok(res) => (unpack_chain(&template, mask, res.theta.as_slice())?, res.iterations, false),
        Err(_) => (template.clone(), 0, true),
    };
    let (value, _) = augmentation(&gp, q, &chain, controls, false)?;
    let marg = chain.marginals();
    let forecast = ForecastResult::from_states(
        ForecastMethod::Variational,
        &model.emission,
        marg.means[1..].to_vec(),
        marg.covs[1..].to_vec(),
    );
    let gap = -value;
    Ok(VariationalForecast {
        chain: AugmentedChain { steps: chain.steps().to_vec() },
        forecast,
        augmentation: value,
        gap,
        gap_per_step: if horizon == 0 { 0.0 } else { gap / horizon as f64 },
        iterations,
        fell_back,
    })
}

/// `Δ = L - L'` for a given continuation starting from `start`.
pub fn prediction_gap(
    model: &GpssmModel,
    start: &GaussianDist,
    aug: &AugmentedChain,
    controls: Option<&DMatrix<f64>>,
) -> Result<f64> {
    check_forecast_inputs(model, start, aug.horizon(), controls)?;
    let gp = model.transition_gp()?;
    let chain = aug.chain_from(start)?;
    Ok(-augmentation(&gp, &model.process_noise, &chain, controls, false)?.0)
}

/// Monte-Carlo estimate of the expected path KL between the continuation and
/// `p(x_{T+1:T+P} | f, x_T)`, with its standard error.
pub fn gap_mc_estimate<R: Rng + ?Sized>(
    model: &GpssmModel,
    start: &GaussianDist,
    aug: &AugmentedChain,
    controls: Option<&DMatrix<f64>>,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    check_forecast_inputs(model, start, aug.horizon(), controls)?;
    if aug.horizon() == 0 {
        return Ok((0.0, 0.0));
    }
    if n_samples < 2 {
        return Err(GpssmError::InvalidParameter("need at least 2 samples".into()));
    }
    let gp = model.transition_gp()?;
    let q = &model.process_noise;
    let d = model.state_dim();
    let log_det_q: f64 = q.iter().map(|v| v.ln()).sum();
    let step_consts: Vec<(f64, f64)> = aug
        .steps
        .iter()
        .map(|s| {
            let l = s.cond_factor();
            let tr: f64 = (0..d).map(|i| l.row(i).norm_squared() / q[i]).sum();
            (tr, crate::linalg::logdet_from_factor(l))
        })
        .collect();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let mut x = start.sample(rng);
        let mut sampler = gp.sample_function_path(rng);
        let mut kl = 0.0;
        for (p, s) in aug.steps.iter().enumerate() {
            let f = sampler.next(&gp_input(&x, controls, p))?;
            let mu = s.transition() * &x + s.offset();
            let diff = &f - &mu;
            let maha: f64 = (0..d).map(|i| diff[i] * diff[i] / q[i]).sum();
            let (tr, logdet) = step_consts[p];
            kl += 0.5 * (tr + maha - d as f64 + log_det_q - logdet);
            x = add_noise(&mu, s.cond_factor(), rng);
        }
        sum += kl;
        sq += kl * kl;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// A fresh `q(x)` over an observation prefix with all trained parameters frozen.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub chain: GaussMarkovChain,
    /// The bound on the prefix under the trained `q(u)`.
    pub terms: ElboTerms,
    pub iterations: usize,
}

impl FilterResult {
    /// Marginal of the last filtered state, the usual forecast start.
    pub fn last_state(&self) -> Result<GaussianDist> {
        self.chain.marginals().marginal(self.chain.len())
    }
}

/// Point-estimate initialization: propagate the mean through the GP mean and
/// correct with a Kalman update against each observation.
fn seed_chain(model: &GpssmModel, seq: &Sequence) -> Result<GaussMarkovChain> {
    let gp = model.transition_gp()?;
    let d = model.state_dim();
    let c = model.emission.c();
    let r = model.emission.noise_var();
    let mut mean = model.state_prior.mean().clone();
    let mut steps = Vec::with_capacity(seq.len());
    let mut first_cov = None;
    for t in 1..=seq.len() {
        let (mf, vf) = gp.conditional_moments(&gp_input(&mean, seq.controls(), t - 1))?;
        let mut cov = DMatrix::from_diagonal(&(vf + &model.process_noise));
        let mut m = mf;
        for i in 0..model.obs_dim() {
            let y = seq.observations()[(t - 1, i)];
            if y.is_nan() {
                continue;
            }
            let ci = c.row(i).transpose();
            let sc = &cov * &ci;
            let s = ci.dot(&sc) + r[i];
            let resid = y - ci.dot(&m) - model.emission.offset()[i];
            m += &sc * (resid / s);
            cov -= &sc * sc.transpose() / s;
        }
        let l = psd_factor(&sym(&cov), "filter seed covariance")?;
        if first_cov.is_none() {
            first_cov = Some(l.clone());
        }
        steps.push(AffineStep::new_clamped(DMatrix::zeros(d, d), m.clone(), l)?);
        mean = m;
    }
    let initial = match (&first_cov, steps.first()) {
        (Some(l), Some(s)) => GaussianDist::new_clamped(s.offset().clone(), l.clone())?,
        _ => model.state_prior.clone(),
    };
    GaussMarkovChain::new(initial, steps)
}

/// Fits a fresh `q(x)` to `prefix` against the bound with the GP, noise,
/// emission parameters and `q(u)` frozen. An empty prefix returns the state prior.
pub fn filter(model: &GpssmModel, prefix: &Sequence, cfg: &LbfgsConfig) -> Result<FilterResult> {
    model.validate()?;
    if prefix.obs_dim() != model.obs_dim() || prefix.control_dim() != model.control_dim {
        return Err(GpssmError::DimensionMismatch("prefix does not match the model's data shape".into()));
    }
    let mut template = model.clone();
    template.q_x = if prefix.is_empty() {
        GaussMarkovChain::new(model.state_prior.clone(), Vec::new())?
    } else {
        seed_chain(model, prefix)?
    };
    if prefix.is_empty() {
        let terms = elbo_with(&template, prefix, QuMode::Fixed(&model.q_u))?;
        return Ok(FilterResult { chain: template.q_x, terms, iterations: 0 });
    }
    let mask = ParamMask::states_only();
    let q_u = &model.q_u;
    let objective = |theta: &DVector<f64>| {
        let m = unpack(&template, mask, theta)?;
        let (terms, g) = elbo_gradient_with(&m, prefix, QuMode::Fixed(q_u))?;
        Ok((terms.total, pack_gradient(&m, &g, mask), terms))
    };
    let res = maximize(objective, pack(&template, mask), cfg, |_, _| {})?;
    let fitted = unpack(&template, mask, &res.theta)?;
    Ok(FilterResult { chain: fitted.q_x, terms: res.extra, iterations: res.iterations })
}

/// Inverse-variance weighted distance of `x` from a Gaussian, per dimension.
pub fn standardized_error(x: &DVector<f64>, dist: &GaussianDist) -> DVector<f64> {
    let l = dist.cov_factor();
    lower_solve_vec(l, &(x - dist.mean()))
}
