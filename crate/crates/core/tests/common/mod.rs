//! Random problems and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use gpssm::gaussian::GaussianDist;
use gpssm::kernel::ArdRbfKernel;
use gpssm::markov::{AffineStep, GaussMarkovChain};
use gpssm::model::{EmissionModel, GpssmModel, Sequence};
use gpssm::sparse_gp::{InducingSet, MeanFunction, SparseGpPosterior};
use gpssm::systems::LinearSsm;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gauss_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

/// Lower-triangular factor with diagonal in `diag·[0.5, 1.5)`.
pub fn lower(rng: &mut impl Rng, d: usize, diag: f64, off: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => diag * (0.5 + rng.random::<f64>()),
        std::cmp::Ordering::Greater => off * gauss(rng),
        std::cmp::Ordering::Less => 0.0,
    })
}

pub fn random_gaussian(rng: &mut impl Rng, d: usize, scale: f64) -> GaussianDist {
    let mean = gauss_vec(rng, d);
    GaussianDist::new(mean, lower(rng, d, scale, 0.3 * scale)).unwrap()
}

pub fn random_kernel(rng: &mut impl Rng, din: usize) -> ArdRbfKernel {
    let ls = DVector::from_fn(din, |_, _| 0.7 + rng.random::<f64>());
    ArdRbfKernel::new(0.5 + rng.random::<f64>(), ls).unwrap()
}

pub fn random_chain(rng: &mut impl Rng, t_len: usize, d: usize) -> GaussMarkovChain {
    let initial = random_gaussian(rng, d, 0.6);
    let steps = (0..t_len)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |i, j| if i == j { 0.7 } else { 0.0 } + 0.2 * gauss(rng));
            AffineStep::new(a, 0.3 * gauss_vec(rng, d), lower(rng, d, 0.4, 0.1)).unwrap()
        })
        .collect();
    GaussMarkovChain::new(initial, steps).unwrap()
}

/// A free-form `q(u)` that is neither the prior nor the optimum.
pub fn random_qu(rng: &mut impl Rng, outputs: usize, m: usize) -> SparseGpPosterior {
    let means = (0..outputs).map(|_| 0.5 * gauss_vec(rng, m)).collect();
    let factors = (0..outputs).map(|_| lower(rng, m, 0.3, 0.1)).collect();
    SparseGpPosterior::new(means, factors).unwrap()
}

/// A random well-conditioned model and a matching sequence.
pub fn random_problem(
    seed: u64,
    t_len: usize,
    d: usize,
    p: usize,
    m: usize,
    du: usize,
    mean_fn: MeanFunction,
) -> (GpssmModel, Sequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let din = d + du;
    let kernels: Vec<_> = (0..d).map(|_| random_kernel(&mut rng, din)).collect();
    let z = InducingSet::new(DMatrix::from_fn(m, din, |_, _| 2.0 * gauss(&mut rng))).unwrap();
    let q_x = random_chain(&mut rng, t_len, d);
    let q_u = SparseGpPosterior::prior(&kernels, &z).unwrap();
    let emission = EmissionModel::new(
        DMatrix::from_fn(p, d, |_, _| gauss(&mut rng)),
        0.2 * gauss_vec(&mut rng, p),
        DVector::from_fn(p, |_, _| 0.1 + 0.2 * rng.random::<f64>()),
    )
    .unwrap();
    let y = DMatrix::from_fn(t_len, p, |_, _| gauss(&mut rng));
    let u = (du > 0).then(|| DMatrix::from_fn(t_len, du, |_, _| gauss(&mut rng)));
    let model = GpssmModel {
        kernels,
        inducing: z,
        process_noise: DVector::from_fn(d, |_, _| 0.1 + 0.3 * rng.random::<f64>()),
        emission,
        state_prior: GaussianDist::new(DVector::zeros(d), DMatrix::identity(d, d) * 1.5).unwrap(),
        q_x,
        q_u,
        mean_fn,
        control_dim: du,
    };
    (model, Sequence::new(y, u).unwrap())
}

/// Stacked mean and covariance of `x_0..x_T`, built by writing every state
/// as an affine map of the initial draw and the step innovations.
pub fn dense_chain(chain: &GaussMarkovChain) -> (DVector<f64>, DMatrix<f64>) {
    let d = chain.dim();
    let t_len = chain.steps().len();
    let big = d * (t_len + 1);
    // x_t = offset_t + W_t ε, ε = (ε_0, ..., ε_T) standard normal
    let mut w = DMatrix::zeros(big, big);
    let mut mean = DVector::zeros(big);
    w.view_mut((0, 0), (d, d)).copy_from(chain.initial().cov_factor());
    mean.rows_mut(0, d).copy_from(chain.initial().mean());
    for (i, s) in chain.steps().iter().enumerate() {
        let t = i + 1;
        let prev_w = w.rows((t - 1) * d, d).into_owned();
        let mut row = s.transition() * prev_w;
        row.view_mut((0, t * d), (d, d)).copy_from(s.cond_factor());
        w.rows_mut(t * d, d).copy_from(&row);
        let m = s.transition() * mean.rows((t - 1) * d, d) + s.offset();
        mean.rows_mut(t * d, d).copy_from(&m);
    }
    let cov = &w * w.transpose();
    (mean, cov)
}

pub fn gaussian_entropy(cov: &DMatrix<f64>) -> f64 {
    let n = cov.nrows() as f64;
    let logdet = 2.0 * cov.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum();
    0.5 * (n * (2.0 * PI * std::f64::consts::E).ln() + logdet)
}

pub fn random_linear_system(rng: &mut impl Rng, n: usize, p: usize) -> LinearSsm {
    LinearSsm {
        a: DMatrix::from_fn(n, n, |i, j| if i == j { 0.8 } else { 0.0 } + 0.15 * gauss(rng)),
        b: 0.2 * gauss_vec(rng, n),
        q: DVector::from_fn(n, |_, _| 0.05 + 0.3 * rng.random::<f64>()),
        c: DMatrix::from_fn(p, n, |_, _| gauss(rng)),
        d: 0.3 * gauss_vec(rng, p),
        r: DVector::from_fn(p, |_, _| 0.05 + 0.2 * rng.random::<f64>()),
        prior: random_gaussian(rng, n, 0.8),
    }
}

/// Posterior over the stacked `x_0..x_T` and `log p(y)` by conditioning the
/// full joint Gaussian of states and observed entries.
pub fn dense_kalman(sys: &LinearSsm, y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
    let n = sys.state_dim();
    let t_len = y.nrows();
    let steps = (0..t_len)
        .map(|_| AffineStep::new(sys.a.clone(), sys.b.clone(), DMatrix::from_diagonal(&sys.q.map(f64::sqrt))).unwrap())
        .collect();
    let (mu, sigma) = dense_chain(&GaussMarkovChain::new(sys.prior.clone(), steps).unwrap());
    let obs: Vec<(usize, usize)> = (0..t_len)
        .flat_map(|t| (0..y.ncols()).map(move |i| (t, i)))
        .filter(|&(t, i)| !y[(t, i)].is_nan())
        .collect();
    let k = obs.len();
    let mut h = DMatrix::zeros(k, mu.len());
    let mut resid = DVector::zeros(k);
    let mut s = DMatrix::zeros(k, k);
    for (row, &(t, i)) in obs.iter().enumerate() {
        for j in 0..n {
            h[(row, (t + 1) * n + j)] = sys.c[(i, j)];
        }
        resid[row] = y[(t, i)] - sys.d[i];
        s[(row, row)] = sys.r[i];
    }
    resid -= &h * &mu;
    s += &h * &sigma * h.transpose();
    let ch = s.clone().cholesky().unwrap();
    let gain = &sigma * h.transpose() * ch.inverse();
    let mean = &mu + &gain * &resid;
    let cov = &sigma - &gain * &h * &sigma;
    let logdet = 2.0 * ch.l().diagonal().map(f64::ln).sum();
    let ll = -0.5 * (k as f64 * (2.0 * PI).ln() + logdet + resid.dot(&ch.solve(&resid)));
    (mean, cov, ll)
}

/// Running mean and standard error of a scalar Monte-Carlo estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mc {
    n: usize,
    sum: f64,
    sq: f64,
}

impl Mc {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sq += v * v;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    pub fn se(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        (((self.sq - n * m * m) / (n - 1.0)).max(0.0) / n).sqrt()
    }

    /// Distance from `exact` in standard errors. A zero-variance estimator
    /// must match to rounding.
    pub fn z(&self, exact: f64) -> f64 {
        let diff = (self.mean() - exact).abs();
        let floor = 1e-12 * (1.0 + exact.abs());
        if diff <= floor {
            0.0
        } else {
            diff / self.se().max(floor)
        }
    }
}
