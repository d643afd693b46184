//! Flattening of model parameters into an unconstrained vector.
//!
//! Positive quantities are stored as logs, triangular factors keep their
//! strictly-lower entries as-is and store the log of the diagonal.

use nalgebra::{DMatrix, DVector};

use crate::elbo::ModelGradient;
use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::kernel::ArdRbfKernel;
use crate::markov::{AffineStep, ChainGradient, GaussMarkovChain};
use crate::model::{EmissionModel, GpssmModel};
use crate::sparse_gp::InducingSet;

/// Which parameter groups are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub kernels: bool,
    pub inducing: bool,
    pub process_noise: bool,
    pub emission: bool,
    pub states: ChainMask,
}

/// Free parts of a Gauss-Markov chain: optionally `q(x_0)`, and every step
/// from `first_step` on. A free `q(x_0)` requires `first_step == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainMask {
    pub initial: bool,
    pub first_step: usize,
}

impl ChainMask {
    pub const ALL: ChainMask = ChainMask { initial: true, first_step: 0 };
    pub const NONE: ChainMask = ChainMask { initial: false, first_step: usize::MAX };
}

impl ParamMask {
    pub fn all() -> Self {
        Self { kernels: true, inducing: true, process_noise: true, emission: true, states: ChainMask::ALL }
    }

    pub fn states_only() -> Self {
        Self { kernels: false, inducing: false, process_noise: false, emission: false, states: ChainMask::ALL }
    }
}

fn push_lower_log_diag(l: &DMatrix<f64>, out: &mut Vec<f64>) {
    for j in 0..l.ncols() {
        for i in j..l.nrows() {
            out.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
}

fn push_lower_grad(l: &DMatrix<f64>, g: &DMatrix<f64>, out: &mut Vec<f64>) {
    for j in 0..l.ncols() {
        for i in j..l.nrows() {
            out.push(if i == j { g[(i, i)] * l[(i, i)] } else { g[(i, j)] });
        }
    }
}

struct Reader<'a> {
    theta: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        if self.pos + n > self.theta.len() {
            return Err(GpssmError::DimensionMismatch(format!(
                "parameter vector too short: need {} entries, have {}",
                self.pos + n,
                self.theta.len()
            )));
        }
        let s = &self.theta[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn lower(&mut self, d: usize) -> Result<DMatrix<f64>> {
        let mut l = DMatrix::zeros(d, d);
        let v = self.take(d * (d + 1) / 2)?;
        let mut k = 0;
        for j in 0..d {
            for i in j..d {
                l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
                k += 1;
            }
        }
        Ok(l)
    }

    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(r, c, self.take(r * c)?))
    }

    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(self.take(n)?))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.theta.len() {
            return Err(GpssmError::DimensionMismatch(format!(
                "parameter vector has {} entries, expected {}",
                self.theta.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

fn push_matrix(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
}

fn chain_means(chain: &GaussMarkovChain) -> Vec<DVector<f64>> {
    let mut means = vec![chain.initial().mean().clone()];
    for s in chain.steps() {
        let next = s.transition() * means.last().expect("initial mean") + s.offset();
        means.push(next);
    }
    means
}

/// Steps are stored as `(A_t, m_t, L_t)` with the marginal mean `m_t` in place
/// of the offset `b_t = m_t - A_t m_{t-1}`, which decouples the means of
/// different time steps.
pub fn pack_chain(chain: &GaussMarkovChain, mask: ChainMask, out: &mut Vec<f64>) {
    debug_assert!(!mask.initial || mask.first_step == 0);
    let means = chain_means(chain);
    if mask.initial {
        out.extend(chain.initial().mean().iter());
        push_lower_log_diag(chain.initial().cov_factor(), out);
    }
    for (t, s) in chain.steps().iter().enumerate().skip(mask.first_step) {
        push_matrix(s.transition(), out);
        out.extend(means[t + 1].iter());
        push_lower_log_diag(s.cond_factor(), out);
    }
}

pub(crate) fn pack_chain_gradient(chain: &GaussMarkovChain, g: &ChainGradient, mask: ChainMask, out: &mut Vec<f64>) {
    let means = chain_means(chain);
    let steps = chain.steps();
    // ∂/∂m_t = ∂/∂b_t - A_{t+1}ᵀ ∂/∂b_{t+1}
    let mean_grad = |t: usize| -> DVector<f64> {
        let own = if t == 0 { g.initial_mean.clone() } else { g.offsets[t - 1].clone() };
        match steps.get(t) {
            Some(next) => own - next.transition().transpose() * &g.offsets[t],
            None => own,
        }
    };
    if mask.initial {
        out.extend(mean_grad(0).iter());
        push_lower_grad(chain.initial().cov_factor(), &g.initial_factor, out);
    }
    for (t, s) in steps.iter().enumerate().skip(mask.first_step) {
        let ga = &g.transitions[t] - &g.offsets[t] * means[t].transpose();
        push_matrix(&ga, out);
        out.extend(mean_grad(t + 1).iter());
        push_lower_grad(s.cond_factor(), &g.cond_factors[t], out);
    }
}

fn read_chain(template: &GaussMarkovChain, mask: ChainMask, r: &mut Reader) -> Result<GaussMarkovChain> {
    let d = template.dim();
    let initial = if mask.initial {
        let mean = r.vector(d)?;
        GaussianDist::new_clamped(mean, r.lower(d)?)?
    } else {
        template.initial().clone()
    };
    let mut prev_mean = initial.mean().clone();
    let mut steps = Vec::with_capacity(template.len());
    for (t, s) in template.steps().iter().enumerate() {
        if t < mask.first_step {
            steps.push(s.clone());
            prev_mean = s.transition() * &prev_mean + s.offset();
        } else {
            let a = r.matrix(d, d)?;
            let m = r.vector(d)?;
            let b = &m - &a * &prev_mean;
            steps.push(AffineStep::new_clamped(a, b, r.lower(d)?)?);
            prev_mean = m;
        }
    }
    GaussMarkovChain::new(initial, steps)
}

/// Rebuilds a chain shaped like `template` from [`pack_chain`] output.
pub fn unpack_chain(template: &GaussMarkovChain, mask: ChainMask, theta: &[f64]) -> Result<GaussMarkovChain> {
    let mut r = Reader { theta, pos: 0 };
    let c = read_chain(template, mask, &mut r)?;
    r.finish()?;
    Ok(c)
}

pub fn pack(model: &GpssmModel, mask: ParamMask) -> DVector<f64> {
    let mut out = Vec::new();
    if mask.kernels {
        for k in &model.kernels {
            out.push(k.log_variance());
            out.extend(k.log_lengthscales().iter());
        }
    }
    if mask.inducing {
        push_matrix(model.inducing.z(), &mut out);
    }
    if mask.process_noise {
        out.extend(model.process_noise.iter().map(|q| q.ln()));
    }
    if mask.emission {
        push_matrix(model.emission.c(), &mut out);
        out.extend(model.emission.offset().iter());
        out.extend(model.emission.noise_var().iter().map(|r| r.ln()));
    }
    pack_chain(&model.q_x, mask.states, &mut out);
    DVector::from_vec(out)
}

/// Inverse of [`pack`]; groups outside the mask are copied from `template`.
pub fn unpack(template: &GpssmModel, mask: ParamMask, theta: &DVector<f64>) -> Result<GpssmModel> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(GpssmError::Numerical { term: "parameters".into(), detail: "non-finite parameter vector".into() });
    }
    let mut r = Reader { theta: theta.as_slice(), pos: 0 };
    let mut m = template.clone();
    let din = template.input_dim();
    let d = template.state_dim();
    if mask.kernels {
        for k in m.kernels.iter_mut() {
            let lv = r.take(1)?[0];
            *k = ArdRbfKernel::from_log(lv, r.vector(din)?);
        }
    }
    if mask.inducing {
        m.inducing = InducingSet::new(r.matrix(template.inducing.len(), din)?)?;
    }
    if mask.process_noise {
        m.process_noise = r.vector(d)?.map(f64::exp);
    }
    if mask.emission {
        let p = template.obs_dim();
        let c = r.matrix(p, d)?;
        let off = r.vector(p)?;
        let noise = r.vector(p)?.map(f64::exp);
        m.emission = EmissionModel::new(c, off, noise)?;
    }
    m.q_x = read_chain(&template.q_x, mask.states, &mut r)?;
    r.finish()?;
    Ok(m)
}

/// Gradient laid out like [`pack`].
pub fn pack_gradient(model: &GpssmModel, g: &ModelGradient, mask: ParamMask) -> DVector<f64> {
    let mut out = Vec::new();
    if mask.kernels {
        for d in 0..model.state_dim() {
            out.push(g.kernel_log_variance[d]);
            out.extend(g.kernel_log_lengthscales[d].iter());
        }
    }
    if mask.inducing {
        push_matrix(&g.inducing, &mut out);
    }
    if mask.process_noise {
        out.extend(g.log_process_noise.iter());
    }
    if mask.emission {
        push_matrix(&g.emission_c, &mut out);
        out.extend(g.emission_offset.iter());
        out.extend(g.log_emission_noise.iter());
    }
    pack_chain_gradient(&model.q_x, &g.chain, mask.states, &mut out);
    DVector::from_vec(out)
}
