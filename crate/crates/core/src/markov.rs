//! Trajectory posteriors with Markov structure.
//!
//! A [`GaussMarkovChain`] describes a joint Gaussian over `x_0..x_T` through an
//! initial Gaussian and one affine-Gaussian conditional per step,
//!
//! ```text
//! x_t | x_{t-1} ~ N(A_t x_{t-1} + b_t, L_t L_tᵀ)
//! ```
//!
//! Marginals, pairwise moments and entropy all cost `O(T·D³)`.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpssmError, Result};
use crate::gaussian::{validate_factor, GaussianDist};
use crate::linalg::{logdet_from_factor, psd_factor, sym};

/// Largest stacked dimension [`GaussMarkovChain::dense_joint`] will build.
pub const DENSE_JOINT_LIMIT: usize = 10_000;

/// One affine-Gaussian conditional `q(x_t | x_{t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStep", into = "RawStep")]
pub struct AffineStep {
    transition: DMatrix<f64>,
    offset: DVector<f64>,
    cond_factor: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    #[serde(with = "crate::serde_mat::mat")]
    transition: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vec")]
    offset: DVector<f64>,
    #[serde(with = "crate::serde_mat::mat")]
    cond_factor: DMatrix<f64>,
}

impl TryFrom<RawStep> for AffineStep {
    type Error = GpssmError;
    fn try_from(r: RawStep) -> Result<Self> {
        AffineStep::new(r.transition, r.offset, r.cond_factor)
    }
}

impl From<AffineStep> for RawStep {
    fn from(s: AffineStep) -> Self {
        RawStep { transition: s.transition, offset: s.offset, cond_factor: s.cond_factor }
    }
}

impl AffineStep {
    pub fn new(
        transition: DMatrix<f64>,
        offset: DVector<f64>,
        cond_factor: DMatrix<f64>,
    ) -> Result<Self> {
        Self::build(transition, offset, cond_factor, false)
    }

    /// Accepts conditional factors with tiny diagonals by clamping them.
    pub fn new_clamped(
        transition: DMatrix<f64>,
        offset: DVector<f64>,
        cond_factor: DMatrix<f64>,
    ) -> Result<Self> {
        Self::build(transition, offset, cond_factor, true)
    }

    fn build(
        transition: DMatrix<f64>,
        offset: DVector<f64>,
        mut cond_factor: DMatrix<f64>,
        clamp: bool,
    ) -> Result<Self> {
        let d = offset.len();
        if transition.shape() != (d, d) || cond_factor.shape() != (d, d) {
            return Err(GpssmError::DimensionMismatch(format!(
                "step with offset of length {d}, transition {:?}, factor {:?}",
                transition.shape(),
                cond_factor.shape()
            )));
        }
        if transition.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(GpssmError::InvalidParameter("non-finite step parameters".into()));
        }
        validate_factor(&mut cond_factor, clamp)?;
        Ok(Self { transition, offset, cond_factor })
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn cond_factor(&self) -> &DMatrix<f64> {
        &self.cond_factor
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// `H(x_t | x_{t-1})`, which does not depend on the conditioning value.
    pub fn conditional_entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (2.0 * PI * E).ln() + 0.5 * logdet_from_factor(&self.cond_factor)
    }
}

/// Linear-Gaussian Markov chain over `x_0..x_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain", into = "RawChain")]
pub struct GaussMarkovChain {
    initial: GaussianDist,
    steps: Vec<AffineStep>,
}

#[derive(Serialize, Deserialize)]
struct RawChain {
    initial: GaussianDist,
    steps: Vec<AffineStep>,
}

impl TryFrom<RawChain> for GaussMarkovChain {
    type Error = GpssmError;
    fn try_from(r: RawChain) -> Result<Self> {
        GaussMarkovChain::new(r.initial, r.steps)
    }
}

impl From<GaussMarkovChain> for RawChain {
    fn from(c: GaussMarkovChain) -> Self {
        RawChain { initial: c.initial, steps: c.steps }
    }
}

/// Per-step marginal moments of a chain. `cross[t-1]` is `Cov(x_{t-1}, x_t)`.
#[derive(Debug, Clone)]
pub struct ChainMarginals {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub cross: Vec<DMatrix<f64>>,
}

impl ChainMarginals {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Joint moments of `(x_{t-1}, x_t)`, `1 ≤ t ≤ T`.
    pub fn pair(&self, t: usize) -> Result<PairMoments> {
        let len = self.means.len().saturating_sub(1);
        if t == 0 || t > len {
            return Err(GpssmError::IndexOutOfRange { index: t, len });
        }
        Ok(PairMoments {
            mean_prev: self.means[t - 1].clone(),
            mean_next: self.means[t].clone(),
            cov_prev: self.covs[t - 1].clone(),
            cov_next: self.covs[t].clone(),
            cross_cov: self.cross[t - 1].clone(),
        })
    }

    pub fn marginal(&self, t: usize) -> Result<GaussianDist> {
        if t >= self.means.len() {
            return Err(GpssmError::IndexOutOfRange { index: t, len: self.means.len() });
        }
        GaussianDist::from_covariance(self.means[t].clone(), &self.covs[t])
    }
}

/// Moments of two consecutive states `(x_{t-1}, x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMoments {
    pub mean_prev: DVector<f64>,
    pub mean_next: DVector<f64>,
    pub cov_prev: DMatrix<f64>,
    pub cov_next: DMatrix<f64>,
    /// `Cov(x_{t-1}, x_t)`
    pub cross_cov: DMatrix<f64>,
}

impl PairMoments {
    pub fn new(
        mean_prev: DVector<f64>,
        mean_next: DVector<f64>,
        cov_prev: DMatrix<f64>,
        cov_next: DMatrix<f64>,
        cross_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self { mean_prev, mean_next, cov_prev, cov_next, cross_cov };
        p.joint_factor()?;
        Ok(p)
    }

    /// Covariance of the stacked vector `(x_{t-1}, x_t)`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let (a, b) = (self.mean_prev.len(), self.mean_next.len());
        let mut j = DMatrix::zeros(a + b, a + b);
        j.view_mut((0, 0), (a, a)).copy_from(&self.cov_prev);
        j.view_mut((a, a), (b, b)).copy_from(&self.cov_next);
        j.view_mut((0, a), (a, b)).copy_from(&self.cross_cov);
        j.view_mut((a, 0), (b, a)).copy_from(&self.cross_cov.transpose());
        j
    }

    pub(crate) fn joint_factor(&self) -> Result<DMatrix<f64>> {
        if self.cov_prev.nrows() != self.mean_prev.len()
            || self.cov_next.nrows() != self.mean_next.len()
            || self.cross_cov.shape() != (self.mean_prev.len(), self.mean_next.len())
        {
            return Err(GpssmError::DimensionMismatch("pair moments".into()));
        }
        psd_factor(&self.joint_covariance(), "pair joint covariance")
    }

    pub fn prev(&self) -> Result<GaussianDist> {
        GaussianDist::from_covariance(self.mean_prev.clone(), &self.cov_prev)
    }
}

/// Gradients of a scalar objective with respect to chain marginals.
#[derive(Debug, Clone)]
pub(crate) struct MarginalGrads {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub cross: Vec<DMatrix<f64>>,
}

impl MarginalGrads {
    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            means: vec![DVector::zeros(dim); len],
            covs: vec![DMatrix::zeros(dim, dim); len],
            cross: vec![DMatrix::zeros(dim, dim); len.saturating_sub(1)],
        }
    }
}

/// Gradients with respect to the raw chain parameters (`L` entries, not logs).
#[derive(Debug, Clone)]
pub(crate) struct ChainGradient {
    pub initial_mean: DVector<f64>,
    pub initial_factor: DMatrix<f64>,
    pub transitions: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub cond_factors: Vec<DMatrix<f64>>,
}

impl GaussMarkovChain {
    pub fn new(initial: GaussianDist, steps: Vec<AffineStep>) -> Result<Self> {
        let d = initial.dim();
        if let Some((i, _)) = steps.iter().enumerate().find(|(_, s)| s.dim() != d) {
            return Err(GpssmError::DimensionMismatch(format!(
                "step {} has dimension {}, initial state has {d}",
                i + 1,
                steps[i].dim()
            )));
        }
        Ok(Self { initial, steps })
    }

    pub fn initial(&self) -> &GaussianDist {
        &self.initial
    }

    pub fn steps(&self) -> &[AffineStep] {
        &self.steps
    }

    /// Number of transitions `T`; the chain has `T + 1` states.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    /// Forward recursion for all marginal means, covariances and lag-one
    /// cross-covariances.
    pub fn marginals(&self) -> ChainMarginals {
        let n = self.steps.len() + 1;
        let mut means = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        let mut cross = Vec::with_capacity(n - 1);
        means.push(self.initial.mean().clone());
        covs.push(self.initial.covariance());
        for step in &self.steps {
            let (m_prev, s_prev) = (means.last().unwrap(), covs.last().unwrap());
            let a = &step.transition;
            let m = a * m_prev + &step.offset;
            let v = s_prev * a.transpose();
            let s = sym(&(a * &v + &step.cond_factor * step.cond_factor.transpose()));
            means.push(m);
            cross.push(v);
            covs.push(s);
        }
        ChainMarginals { means, covs, cross }
    }

    pub fn pair_moments(&self, t: usize) -> Result<PairMoments> {
        if t == 0 || t > self.len() {
            return Err(GpssmError::IndexOutOfRange { index: t, len: self.len() });
        }
        self.marginals().pair(t)
    }

    /// Entropy of the joint over all states, in nats.
    pub fn entropy(&self) -> f64 {
        self.initial.entropy() + self.steps.iter().map(AffineStep::conditional_entropy).sum::<f64>()
    }

    /// Ancestral sample `x_0, …, x_T`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(self.initial.sample(rng));
        for step in &self.steps {
            let eps = DVector::from_fn(step.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &step.transition * out.last().unwrap() + &step.offset + &step.cond_factor * eps;
            out.push(x);
        }
        out
    }

    /// The joint Gaussian over the stacked trajectory `(x_0, …, x_T)`.
    pub fn dense_joint(&self) -> Result<GaussianDist> {
        let d = self.dim();
        let n = self.steps.len() + 1;
        if n * d > DENSE_JOINT_LIMIT {
            return Err(GpssmError::TooLarge(format!(
                "{n} states of dimension {d} exceed {DENSE_JOINT_LIMIT}"
            )));
        }
        if self.steps.is_empty() {
            return Ok(self.initial.clone());
        }
        let marg = self.marginals();
        let mut cov = DMatrix::zeros(n * d, n * d);
        for s in 0..n {
            // Cov(x_s, x_t) = Cov(x_s, x_{t-1}) A_tᵀ
            let mut block = marg.covs[s].clone();
            cov.view_mut((s * d, s * d), (d, d)).copy_from(&block);
            for t in s + 1..n {
                block *= self.steps[t - 1].transition.transpose();
                cov.view_mut((s * d, t * d), (d, d)).copy_from(&block);
                cov.view_mut((t * d, s * d), (d, d)).copy_from(&block.transpose());
            }
        }
        let mean = DVector::from_iterator(n * d, marg.means.iter().flat_map(|m| m.iter().copied()));
        GaussianDist::from_covariance(mean, &cov)
    }

    /// Reverse pass of [`GaussMarkovChain::marginals`].
    pub(crate) fn backward(&self, marg: &ChainMarginals, mut g: MarginalGrads) -> ChainGradient {
        let t_len = self.steps.len();
        let mut transitions = vec![DMatrix::zeros(0, 0); t_len];
        let mut offsets = vec![DVector::zeros(0); t_len];
        let mut cond_factors = vec![DMatrix::zeros(0, 0); t_len];
        for t in (1..=t_len).rev() {
            let step = &self.steps[t - 1];
            let a = &step.transition;
            let s_prev = &marg.covs[t - 1];
            let gs = sym(&g.covs[t]);
            let gm = g.means[t].clone();
            let gv = g.cross[t - 1].clone();
            let ga = (&gs * a * s_prev) * 2.0 + &gm * marg.means[t - 1].transpose() + gv.transpose() * s_prev;
            cond_factors[t - 1] = (&gs * &step.cond_factor) * 2.0;
            offsets[t - 1] = gm.clone();
            transitions[t - 1] = ga;
            g.covs[t - 1] += a.transpose() * &gs * a + gv * a;
            g.means[t - 1] += a.transpose() * gm;
        }
        let gs0 = sym(&g.covs[0]);
        ChainGradient {
            initial_mean: g.means[0].clone(),
            initial_factor: (gs0 * self.initial.cov_factor()) * 2.0,
            transitions,
            offsets,
            cond_factors,
        }
    }
}
