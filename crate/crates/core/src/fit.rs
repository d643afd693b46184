//! Initialization and training.

use nalgebra::{DMatrix, DVector};

use crate::elbo::{collapsed_qu, elbo, elbo_gradient, ElboTerms};
use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::kernel::ArdRbfKernel;
use crate::markov::{AffineStep, GaussMarkovChain};
use crate::model::{EmissionModel, GpssmModel, Sequence};
use crate::optim::{maximize, IterationRecord, LbfgsConfig, StopReason};
use crate::params::{pack, pack_gradient, unpack, ParamMask};
use crate::sparse_gp::{InducingSet, MeanFunction, SparseGpPosterior};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub latent_dim: usize,
    pub num_inducing: usize,
    pub max_iters: usize,
    /// Relative ELBO improvement below which training counts as converged.
    pub tolerance: f64,
    pub seed: u64,
    pub mean_fn: MeanFunction,
    /// Iterations spent on `q(x)` and the emission model before everything is freed.
    pub warmup_iters: usize,
    /// Variance of the isotropic zero-mean state prior `p(x_0)`.
    pub prior_variance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            latent_dim: 1,
            num_inducing: 20,
            max_iters: 1000,
            tolerance: 1e-8,
            seed: 0,
            mean_fn: MeanFunction::Zero,
            warmup_iters: 50,
            prior_variance: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_inducing == 0 || self.max_iters == 0 {
            return Err(GpssmError::InvalidParameter(
                "latent_dim, num_inducing and max_iters must all be at least 1".into(),
            ));
        }
        if !(self.tolerance >= 0.0) || !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(GpssmError::InvalidParameter("tolerance must be ≥ 0 and prior_variance > 0".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub terms: ElboTerms,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: GpssmModel,
    pub terms: ElboTerms,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub converged: bool,
}

fn column_stats(v: impl Iterator<Item = f64>) -> (f64, f64, f64, f64) {
    let (mut n, mut sum, mut sq, mut lo, mut hi) = (0.0, 0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        n += 1.0;
        sum += x;
        sq += x * x;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if n == 0.0 {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let mean = sum / n;
    ((mean), (sq / n - mean * mean).max(0.0), lo, hi)
}

/// Observations with gaps filled by carrying the last seen value (first seen
/// value for leading gaps; zero for an all-missing channel).
fn filled_observations(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for j in 0..y.ncols() {
        let first = y.column(j).iter().copied().find(|v| !v.is_nan()).unwrap_or(0.0);
        let mut last = first;
        for i in 0..y.nrows() {
            if out[(i, j)].is_nan() {
                out[(i, j)] = last;
            } else {
                last = out[(i, j)];
            }
        }
    }
    out
}

fn positive_or(v: f64, fallback: f64) -> f64 {
    if v > 1e-12 && v.is_finite() {
        v
    } else {
        fallback
    }
}

/// Data-driven starting point for [`fit`].
///
/// Latent dimensions up to `D_obs` copy observation channels through `C = [I 0]`;
/// each surplus dimension `D_obs + k` starts from the first differences of
/// channel `k mod D_obs`.
pub fn initialize(seq: &Sequence, config: &FitConfig) -> Result<GpssmModel> {
    config.validate()?;
    if seq.len() < 2 {
        return Err(GpssmError::InvalidParameter(format!("need at least 2 observations, got {}", seq.len())));
    }
    let t_len = seq.len();
    let p = seq.obs_dim();
    let d = config.latent_dim;
    let du = seq.control_dim();
    let y = filled_observations(seq.observations());

    let mut means = DMatrix::zeros(t_len + 1, d);
    for k in 0..d {
        let ch = k % p;
        for t in 1..=t_len {
            means[(t, k)] = if k < p {
                y[(t - 1, ch)]
            } else if t >= 2 {
                y[(t - 1, ch)] - y[(t - 2, ch)]
            } else {
                0.0
            };
        }
        if k >= p && t_len >= 2 {
            means[(1, k)] = means[(2, k)];
        }
        means[(0, k)] = means[(1, k)];
    }

    let mut c = DMatrix::zeros(p, d);
    let mut offset = DVector::zeros(p);
    let mut r = DVector::zeros(p);
    for i in 0..p {
        let (mean, var, _, _) = column_stats(seq.observations().column(i).iter().copied());
        if i < d {
            c[(i, i)] = 1.0;
        } else {
            offset[i] = mean;
        }
        r[i] = 0.1 * positive_or(var, 1.0);
    }
    let emission = EmissionModel::new(c, offset, r)?;

    let phi = config.mean_fn.weight();
    let mut kernels = Vec::with_capacity(d);
    let mut q = DVector::zeros(d);
    let mut lo = DVector::zeros(d + du);
    let mut hi = DVector::zeros(d + du);
    let mut ranges = DVector::zeros(d + du);
    let mut state_sd = DVector::zeros(d);
    for k in 0..d {
        let col = means.column(k);
        let (_, var, a, b) = column_stats(col.iter().copied());
        let scale = positive_or(var, 1.0);
        state_sd[k] = scale.sqrt();
        lo[k] = a;
        hi[k] = b;
        ranges[k] = positive_or(b - a, 1.0);
        let targets = (1..=t_len).map(|t| means[(t, k)] - phi * means[(t - 1, k)]);
        let (tm, tv, _, _) = column_stats(targets);
        q[k] = 0.01 * scale;
        kernels.push(positive_or(tv + tm * tm, scale));
    }
    if let Some(u) = seq.controls() {
        for j in 0..du {
            let (_, _, a, b) = column_stats(u.column(j).iter().copied());
            lo[d + j] = a;
            hi[d + j] = b;
            ranges[d + j] = positive_or(b - a, 1.0);
        }
    }
    let kernels: Vec<ArdRbfKernel> = kernels
        .into_iter()
        .map(|v| ArdRbfKernel::new(v, &ranges * 0.5))
        .collect::<Result<_>>()?;
    for k in 0..d + du {
        if hi[k] - lo[k] < 1e-9 {
            lo[k] -= 0.5;
            hi[k] += 0.5;
        }
    }
    let inducing = InducingSet::covering(&lo, &hi, config.num_inducing)?;

    let step_factor = DMatrix::from_diagonal(&state_sd.map(|s| 0.1 * s));
    let initial = GaussianDist::new(means.row(0).transpose(), step_factor.clone())?;
    let steps = (1..=t_len)
        .map(|t| AffineStep::new(DMatrix::zeros(d, d), means.row(t).transpose(), step_factor.clone()))
        .collect::<Result<Vec<_>>>()?;
    let q_x = GaussMarkovChain::new(initial, steps)?;
    let q_u = SparseGpPosterior::prior(&kernels, &inducing)?;
    let state_prior = GaussianDist::new(DVector::zeros(d), DMatrix::identity(d, d) * config.prior_variance.sqrt())?;
    let model = GpssmModel {
        kernels,
        inducing,
        process_noise: q,
        emission,
        state_prior,
        q_x,
        q_u,
        mean_fn: config.mean_fn,
        control_dim: du,
    };
    model.validate()?;
    Ok(model)
}

/// Maximizes the collapsed bound over `mask` starting from `model`, with a
/// per-iteration callback receiving the accepted iterate's terms.
pub fn optimize(
    model: &GpssmModel,
    seq: &Sequence,
    mask: ParamMask,
    cfg: &LbfgsConfig,
    mut on_iter: impl FnMut(&IterationRecord, &ElboTerms),
) -> Result<(GpssmModel, ElboTerms, usize, StopReason)> {
    let objective = |theta: &DVector<f64>| {
        let m = unpack(model, mask, theta)?;
        let (terms, g) = elbo_gradient(&m, seq)?;
        Ok((terms.total, pack_gradient(&m, &g, mask), terms))
    };
    let theta0 = pack(model, mask);
    let res = maximize(objective, theta0, cfg, |rec, terms| on_iter(rec, terms)).map_err(|e| diverged(model, seq, e))?;
    Ok((unpack(model, mask, &res.theta)?, res.extra, res.iterations, res.reason))
}

fn diverged(model: &GpssmModel, seq: &Sequence, cause: GpssmError) -> GpssmError {
    let dump = match elbo(model, seq) {
        Ok(t) => format!(
            "emission={} transition={} prior={} entropy={} kl_u={} total={}",
            t.emission, t.transition, t.prior, t.entropy, t.kl_u, t.total
        ),
        Err(e) => format!("terms unavailable: {e}"),
    };
    GpssmError::Diverged(format!("{cause}; last good parameters give {dump}"))
}

/// Trains a model from scratch.
pub fn fit(seq: &Sequence, config: &FitConfig) -> Result<FitResult> {
    let init = initialize(seq, config)?;
    fit_from(init, seq, config)
}

/// Continues training from an existing model.
pub fn fit_from(model: GpssmModel, seq: &Sequence, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    model.check_sequence(seq)?;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut offset = 0;
    let mut model = model;
    let mut total_iters = 0;
    let mut converged = false;
    let warm = config.warmup_iters.min(config.max_iters.saturating_sub(1));
    let stages = [
        (ParamMask { kernels: false, inducing: false, process_noise: false, ..ParamMask::all() }, warm),
        (ParamMask::all(), config.max_iters - warm),
    ];
    for (stage, (mask, mut iters)) in stages.into_iter().enumerate() {
        // The last stage restarts with empty curvature memory until a cold
        // start stalls straight away, so a converged model is a fixed point.
        loop {
            if iters == 0 {
                break;
            }
            let cfg = LbfgsConfig { max_iters: iters, rel_tol: config.tolerance, ..LbfgsConfig::default() };
            let (m, _, n, reason) = optimize(&model, seq, mask, &cfg, |rec, terms| {
                if rec.iteration == 0 && !trace.is_empty() {
                    return;
                }
                trace.push(TraceEntry { iteration: offset + rec.iteration, terms: *terms, grad_norm: rec.grad_norm });
            })?;
            model = m;
            offset += n;
            total_iters += n;
            iters -= n;
            converged = matches!(reason, StopReason::Converged | StopReason::SmallGradient);
            if stage == 0 || reason != StopReason::Converged || n <= cfg.patience {
                break;
            }
        }
    }
    model.q_u = collapsed_qu(&model, seq)?;
    let terms = elbo(&model, seq)?;
    Ok(FitResult { model, terms, trace, iterations: total_iters, converged })
}

/// Outcome of one latent dimensionality in a sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub latent_dim: usize,
    pub outcome: std::result::Result<FitResult, String>,
}

impl SweepEntry {
    pub fn elbo(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.terms.total)
    }
}

/// Independent fits for each latent dimensionality with a shared seed; sorted by dimension.
pub fn dim_sweep(seq: &Sequence, dims: &[usize], config: &FitConfig) -> Vec<SweepEntry> {
    let mut dims = dims.to_vec();
    dims.sort_unstable();
    dims.dedup();
    dims.into_iter()
        .map(|d| {
            let cfg = FitConfig { latent_dim: d, ..config.clone() };
            SweepEntry { latent_dim: d, outcome: fit(seq, &cfg).map_err(|e| e.to_string()) }
        })
        .collect()
}

/// The dimension with the largest final bound among successful fits.
pub fn best_dim(entries: &[SweepEntry]) -> Option<usize> {
    entries
        .iter()
        .filter_map(|e| e.elbo().map(|v| (e.latent_dim, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(d, _)| d)
}
