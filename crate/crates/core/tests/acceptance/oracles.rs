//! Criteria checked against brute-force oracles: Monte Carlo, finite
//! differences and dense Gaussian algebra.

use std::f64::consts::PI;

use gpssm::elbo::{
    collapsed_qu, elbo, elbo_gradient, elbo_with, emission_expectation, prior_expectation, transition_expectation,
    transition_stats, QuMode,
};
use gpssm::gaussian::GaussianDist;
use gpssm::kernel::ArdRbfKernel;
use gpssm::model::GpssmModel;
use gpssm::optim::LbfgsConfig;
use gpssm::params::{pack, pack_gradient, unpack, ParamMask};
use gpssm::predict::{gap_mc_estimate, prediction_gap, variational_forecast, AugmentedChain};
use gpssm::sparse_gp::{optimal_qu, qu_moment_gradient, InducingSet, MeanFunction, SparseGpPosterior, TransitionGp};
use gpssm::systems::kalman_smoother;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::*;
use crate::Outcome;

const CASES: usize = 30;
const SAMPLES: usize = 100_000;
/// Sample size for the single confirmatory rerun of a case that exceeds the
/// limit at [`SAMPLES`]; a genuine bias becomes √10 times more significant.
const CONFIRM_SAMPLES: usize = 1_000_000;
const Z_LIMIT: f64 = 3.0;

/// Worst z-score per named quantity.
#[derive(Default)]
struct ZTable {
    rows: Vec<(&'static str, usize, f64)>,
    confirmed: usize,
}

impl ZTable {
    fn record(&mut self, name: &'static str, z: f64) {
        match self.rows.iter_mut().find(|r| r.0 == name) {
            Some(r) => {
                r.1 += 1;
                r.2 = r.2.max(z);
            }
            None => self.rows.push((name, 1, z)),
        }
    }

    /// Runs `case` at the base sample size, rerunning it once with fresh
    /// draws at the confirmation size if any quantity exceeds the limit.
    fn run(&mut self, seed: u64, case: impl Fn(u64, usize, &mut ChaCha8Rng) -> Vec<(&'static str, f64)>) {
        let mut zs = case(seed, SAMPLES, &mut mc_rng(seed, 0));
        if zs.iter().any(|(_, z)| *z >= Z_LIMIT) {
            self.confirmed += 1;
            zs = case(seed, CONFIRM_SAMPLES, &mut mc_rng(seed, 1));
        }
        for (name, z) in zs {
            self.record(name, z);
        }
    }

    fn outcome(&self) -> Outcome {
        let mut detail = self.rows.iter().map(|(n, c, z)| format!("{n} {c} cases max|z| {z:.2}")).collect::<Vec<_>>();
        detail.push(format!("{} cases rerun at {CONFIRM_SAMPLES} samples", self.confirmed));
        Outcome::new(self.rows.iter().all(|r| r.2 < Z_LIMIT), detail.join("; "))
    }
}

/// Draws for the Monte-Carlo side, independent of the problem's own generator.
fn mc_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + stream);
    rng
}

fn kvec(k: &ArdRbfKernel, x: &DVector<f64>, z: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(z.nrows(), |m, _| k.eval(x, &z.row(m).transpose()).unwrap())
}

fn psi_case(seed: u64, samples: usize, mc: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let din = rng.random_range(1..=3);
    let m = rng.random_range(2..=6);
    let k = random_kernel(rng, din);
    let z = DMatrix::from_fn(m, din, |_, _| 1.5 * gauss(rng));
    let q_in = random_gaussian(rng, din, 0.7);
    let w = gauss_vec(rng, m);

    let psi0 = k.psi0(&q_in);
    let psi1 = k.psi1(&q_in, &z).unwrap();
    let psi2 = k.psi2(&q_in, &z).unwrap();
    let (mut m0, mut m1, mut m2) = (Mc::default(), Mc::default(), Mc::default());
    for _ in 0..samples {
        let x = q_in.sample(mc);
        m0.push(k.eval(&x, &x).unwrap());
        let s = kvec(&k, &x, &z).dot(&w);
        m1.push(s);
        m2.push(s * s);
    }

    // cross statistic on a random pair of consecutive states
    let d = din;
    let chain = random_chain(rng, 1, d);
    let pair = chain.pair_moments(1).unwrap();
    let joint = GaussianDist::from_covariance(
        DVector::from_iterator(2 * d, pair.mean_prev.iter().chain(pair.mean_next.iter()).copied()),
        &pair.joint_covariance(),
    )
    .unwrap();
    let cross = k.psi1_cross(&pair, &z).unwrap();
    let v = gauss_vec(rng, d);
    let mut m3 = Mc::default();
    for _ in 0..samples {
        let x = joint.sample(mc);
        let prev = x.rows(0, d).into_owned();
        let next = x.rows(d, d).into_owned();
        m3.push(v.dot(&next) * kvec(&k, &prev, &z).dot(&w));
    }
    vec![
        ("psi0", m0.z(psi0)),
        ("psi1", m1.z(psi1.dot(&w))),
        ("psi2", m2.z(w.dot(&(&psi2 * &w)))),
        ("psi1_cross", m3.z(v.dot(&(&cross * &w)))),
    ]
}

fn expectation_case(seed: u64, samples: usize, mc: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let p = rng.random_range(1..=3);
    let du = rng.random_range(0..=1);
    let mean_fn = if rng.random::<bool>() { MeanFunction::Identity } else { MeanFunction::Zero };
    let (model, seq) = random_problem(rng.random(), 4, d, p, 4, du, mean_fn);
    let q_u = random_qu(&mut rng, d, 4);
    let marg = model.q_x.marginals();
    let em = emission_expectation(&marg, &model.emission, seq.observations());
    let pr = prior_expectation(model.q_x.initial(), &model.state_prior);
    let tr = transition_expectation(&model, &seq, &q_u).unwrap();

    let gp = TransitionGp::new(model.kernels.clone(), model.inducing.clone(), q_u, mean_fn).unwrap();
    let (jm, jc) = dense_chain(&model.q_x);
    let joint = GaussianDist::from_covariance(jm, &jc).unwrap();
    let r = model.emission.noise_var();
    let q = &model.process_noise;
    let (mut me, mut mt, mut mp) = (Mc::default(), Mc::default(), Mc::default());
    for _ in 0..samples {
        let x = joint.sample(mc);
        mp.push(model.state_prior.log_density(&x.rows(0, d).into_owned()));
        let (mut e_sum, mut t_sum) = (0.0, 0.0);
        for t in 1..=seq.len() {
            let xt = x.rows(t * d, d).into_owned();
            let yhat = model.emission.c() * &xt + model.emission.offset();
            for i in 0..p {
                let e = seq.observations()[(t - 1, i)] - yhat[i];
                e_sum += -0.5 * (2.0 * PI * r[i]).ln() - 0.5 * e * e / r[i];
            }
            let mut input: Vec<f64> = x.rows((t - 1) * d, d).iter().copied().collect();
            if let Some(u) = seq.controls() {
                input.extend(u.row(t - 1).iter());
            }
            let (mf, vf) = gp.conditional_moments(&DVector::from_vec(input)).unwrap();
            for k in 0..d {
                let e = xt[k] - mf[k];
                t_sum += -0.5 * (2.0 * PI * q[k]).ln() - 0.5 * (e * e + vf[k]) / q[k];
            }
        }
        me.push(e_sum);
        mt.push(t_sum);
    }
    vec![("emission", me.z(em)), ("transition", mt.z(tr)), ("prior", mp.z(pr))]
}

/// Mean, variance and input covariance of a random projection of `f(x)`.
fn uncertain_case(seed: u64, samples: usize, mc: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let du = rng.random_range(0..=1);
    let din = d + du;
    let m = rng.random_range(3..=6);
    let kernels: Vec<_> = (0..d).map(|_| random_kernel(&mut rng, din)).collect();
    let z = InducingSet::new(DMatrix::from_fn(m, din, |_, _| 1.5 * gauss(&mut rng))).unwrap();
    let mean_fn = if rng.random::<bool>() { MeanFunction::Identity } else { MeanFunction::Zero };
    let gp = TransitionGp::new(kernels, z, random_qu(&mut rng, d, m), mean_fn).unwrap();
    let q_in = random_gaussian(&mut rng, din, 0.6);
    let mom = gp.uncertain_conditional_moments(&q_in, true).unwrap();
    let w = gauss_vec(&mut rng, d);
    let v = gauss_vec(&mut rng, din);
    let mean_w = w.dot(&mom.mean);
    let var_w = w.dot(&(&mom.cov * &w));
    let cross_vw = v.dot(&(&mom.input_cross * &w));
    let (mut mm, mut mv, mut mx) = (Mc::default(), Mc::default(), Mc::default());
    for _ in 0..samples {
        let x = q_in.sample(mc);
        let (mu, var) = gp.conditional_moments(&x).unwrap();
        // outputs are independent given the input
        let f = DVector::from_fn(d, |i, _| mu[i] + var[i].sqrt() * gauss(mc));
        let s = w.dot(&f);
        mm.push(s);
        mv.push((s - mean_w).powi(2));
        mx.push(v.dot(&(&x - q_in.mean())) * (s - mean_w));
    }
    vec![("ucm mean", mm.z(mean_w)), ("ucm variance", mv.z(var_w)), ("ucm input covariance", mx.z(cross_vw))]
}

pub fn c1_expectations() -> Outcome {
    let mut table = ZTable::default();
    for case in 0..CASES as u64 {
        table.run(100 + case, psi_case);
        table.run(1000 + case, expectation_case);
        table.run(2000 + case, uncertain_case);
    }
    table.outcome()
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over `coords`.
fn fd_worst(model: &GpssmModel, seq: &gpssm::model::Sequence, coords: &[usize]) -> f64 {
    let mask = ParamMask::all();
    let (_, g) = elbo_gradient(model, seq).unwrap();
    let an = pack_gradient(model, &g, mask);
    let theta = pack(model, mask);
    let f = |th: &DVector<f64>| elbo(&unpack(model, mask, th).unwrap(), seq).unwrap().total;
    let mut worst: f64 = 0.0;
    for &i in coords {
        let h = 1e-5 * (1.0 + theta[i].abs());
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let fd = (f(&tp) - f(&tm)) / (2.0 * h);
        worst = worst.max((fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1e-2));
    }
    worst
}

pub fn c2_gradients() -> Outcome {
    let (small, seq) = random_problem(11, 10, 1, 1, 5, 0, MeanFunction::Zero);
    let n_small = pack(&small, ParamMask::all()).len();
    let all: Vec<usize> = (0..n_small).collect();
    let w_small = fd_worst(&small, &seq, &all);

    let (big, seq) = random_problem(12, 50, 3, 3, 20, 0, MeanFunction::Zero);
    let n_big = pack(&big, ParamMask::all()).len();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let coords: Vec<usize> = rand::seq::index::sample(&mut rng, n_big, 50).into_vec();
    let w_big = fd_worst(&big, &seq, &coords);
    Outcome::new(
        w_small < 1e-4 && w_big < 1e-4,
        format!(
            "D=1 T=10 M=5: {n_small} coords worst rel err {w_small:.1e}; D=3 T=50 M=20: 50 of {n_big} coords worst {w_big:.1e}"
        ),
    )
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn c3_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // chain marginals and entropy
    let mut chain_err: f64 = 0.0;
    for t_len in [0, 1, 3, 6, 10] {
        for d in 1..=3 {
            let chain = random_chain(&mut rng, t_len, d);
            let (mean, cov) = dense_chain(&chain);
            let marg = chain.marginals();
            for t in 0..=t_len {
                chain_err = chain_err.max((&marg.means[t] - mean.rows(t * d, d)).amax());
                chain_err = chain_err.max(close(&marg.covs[t], &cov.view((t * d, t * d), (d, d)).into_owned()));
                if t > 0 {
                    let dense = cov.view(((t - 1) * d, t * d), (d, d)).into_owned();
                    chain_err = chain_err.max(close(&marg.cross[t - 1], &dense));
                }
            }
            let h = gaussian_entropy(&cov);
            chain_err = chain_err.max((chain.entropy() - h).abs() / (1.0 + h.abs()));
        }
    }

    // Kalman smoother against conditioning the joint Gaussian
    let mut kalman_err: f64 = 0.0;
    for (n, p, t_len) in [(1, 1, 1), (1, 2, 5), (2, 1, 8), (2, 3, 8), (3, 2, 6)] {
        let sys = random_linear_system(&mut rng, n, p);
        let mut y = sys.simulate(t_len, &mut rng).unwrap().observations;
        if t_len > 2 {
            y[(1, 0)] = f64::NAN;
        }
        let k = kalman_smoother(&sys, &y).unwrap();
        let (mean, cov, ll) = dense_kalman(&sys, &y);
        kalman_err = kalman_err.max((k.log_evidence - ll).abs() / (1.0 + ll.abs()));
        for t in 0..=t_len {
            kalman_err = kalman_err.max((&k.means[t] - mean.rows(t * n, n)).amax());
            kalman_err = kalman_err.max(close(&k.covs[t], &cov.view((t * n, t * n), (n, n)).into_owned()));
            if t > 0 {
                let dense = cov.view(((t - 1) * n, t * n), (n, n)).into_owned();
                kalman_err = kalman_err.max(close(&k.cross[t - 1], &dense));
            }
        }
    }

    // optimal q(u): analytic moment gradient and directional finite differences of the bound
    let mut qu_grad: f64 = 0.0;
    let mut qu_fd: f64 = 0.0;
    for seed in 0..5 {
        let d = 1 + seed as usize % 2;
        let (model, seq) = random_problem(300 + seed, 12, d, 2, 5, seed as usize % 2, MeanFunction::Identity);
        let stats = transition_stats(&model, &seq, &model.q_x.marginals()).unwrap();
        let qu = optimal_qu(&stats, &model.kernels, &model.inducing, &model.process_noise).unwrap();
        for (i, (gm, gs)) in qu_moment_gradient(&stats, &qu, &model.kernels, &model.inducing, &model.process_noise)
            .unwrap()
            .into_iter()
            .enumerate()
        {
            let g_factor = (&gs + gs.transpose()) * qu.cov_factor(i);
            qu_grad = qu_grad.max(gm.norm()).max(g_factor.norm());
        }
        let f = |q: &SparseGpPosterior| elbo_with(&model, &seq, QuMode::Fixed(q)).unwrap().total;
        let h = 1e-5;
        for _ in 0..4 {
            let dm: Vec<_> = (0..d).map(|_| gauss_vec(&mut rng, 5)).collect();
            // relative to the factor, whose diagonal can be small
            let dl: Vec<_> = (0..d).map(|i| qu.cov_factor(i) * lower(&mut rng, 5, 1.0, 1.0)).collect();
            let shift = |s: f64| {
                let means = (0..d).map(|i| qu.mean(i) + &dm[i] * s).collect();
                let factors = (0..d).map(|i| qu.cov_factor(i) + &dl[i] * s).collect();
                SparseGpPosterior::new(means, factors).unwrap()
            };
            let slope = (f(&shift(h)) - f(&shift(-h))) / (2.0 * h);
            qu_fd = qu_fd.max(slope.abs());
        }
    }
    Outcome::new(
        chain_err < 1e-8 && kalman_err < 1e-8 && qu_grad <= 1e-5 && qu_fd <= 1e-5,
        format!(
            "chain vs dense {chain_err:.1e}; Kalman vs dense {kalman_err:.1e}; optimal q(u) gradient norm {qu_grad:.1e}, directional FD {qu_fd:.1e}"
        ),
    )
}

/// Expected path KL from sampled function paths, conditioning the GP on the
/// inducing draw and every earlier function value along the path.
fn path_kl_oracle(
    model: &GpssmModel,
    start: &GaussianDist,
    aug: &AugmentedChain,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Mc {
    let d = model.state_dim();
    let z = model.inducing.z();
    let m = z.nrows();
    let q = &model.process_noise;
    let phi = if model.mean_fn == MeanFunction::Identity { 1.0 } else { 0.0 };
    let qu_dists: Vec<_> = (0..d).map(|i| model.q_u.marginal(i).unwrap()).collect();
    let mut mc = Mc::default();
    for _ in 0..n {
        let us: Vec<DVector<f64>> = qu_dists.iter().map(|g| g.sample(rng)).collect();
        let mut inputs: Vec<DVector<f64>> = (0..m).map(|i| z.row(i).transpose()).collect();
        let mut values: Vec<Vec<f64>> = us.iter().map(|u| u.iter().copied().collect()).collect();
        let mut x = start.sample(rng);
        let mut kl = 0.0;
        for s in &aug.steps {
            let mut f = DVector::zeros(d);
            for k in 0..d {
                let kern = &model.kernels[k];
                let nk = inputs.len();
                // the inducing block carries the same jitter as the model's prior on u
                let mut gram = DMatrix::from_fn(nk, nk, |a, b| kern.eval(&inputs[a], &inputs[b]).unwrap())
                    + DMatrix::identity(nk, nk) * 1e-10 * kern.variance();
                gram.view_mut((0, 0), (m, m)).copy_from(&kern.gram_jittered(z));
                let kx = DVector::from_fn(nk, |a, _| kern.eval(&inputs[a], &x).unwrap());
                let ch = gram.cholesky().unwrap();
                let alpha = ch.solve(&kx);
                let mean = alpha.dot(&DVector::from_column_slice(&values[k]));
                let var = (kern.variance() - kx.dot(&alpha)).max(0.0);
                f[k] = phi * x[k] + mean + var.sqrt() * gauss(rng);
            }
            for (k, v) in values.iter_mut().enumerate() {
                v.push(f[k] - phi * x[k]);
            }
            inputs.push(x.clone());
            let mu = s.transition() * &x + s.offset();
            let cov = s.cond_factor() * s.cond_factor().transpose();
            let diff = &f - &mu;
            let tr: f64 = (0..d).map(|i| cov[(i, i)] / q[i]).sum();
            let maha: f64 = (0..d).map(|i| diff[i] * diff[i] / q[i]).sum();
            let logdet_q: f64 = q.iter().map(|v| v.ln()).sum();
            let logdet_s = 2.0 * s.cond_factor().diagonal().map(|v| v.abs().ln()).sum();
            kl += 0.5 * (tr + maha - d as f64 + logdet_q - logdet_s);
            x = &mu + s.cond_factor() * gauss_vec(rng, d);
        }
        mc.push(kl);
    }
    mc
}

pub fn c7_gap_identity() -> Outcome {
    let mut worst_lib: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let n = 20_000;
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + case);
        let d = 1 + case as usize % 2;
        let mean_fn = if case % 3 == 0 { MeanFunction::Identity } else { MeanFunction::Zero };
        let (mut model, seq) = random_problem(700 + case, 6, d, 2, 5, 0, mean_fn);
        model.q_u = collapsed_qu(&model, &seq).unwrap();
        let horizon = 1 + case as usize % 5;
        let start = random_gaussian(&mut rng, d, 0.4);
        let cfg = LbfgsConfig { max_iters: 30, ..LbfgsConfig::default() };
        let aug = variational_forecast(&model, &start, horizon, None, &cfg).unwrap().chain;
        let gap = prediction_gap(&model, &start, &aug, None).unwrap();
        let (est, se) = gap_mc_estimate(&model, &start, &aug, None, n, &mut rng).unwrap();
        worst_lib = worst_lib.max((gap - est).abs() / se);
        let oracle = path_kl_oracle(&model, &start, &aug, n, &mut rng);
        worst_oracle = worst_oracle.max(oracle.z(gap));
    }
    Outcome::new(
        worst_lib < 3.0 && worst_oracle < 3.0,
        format!("10 models, P 1..5: max |z| {worst_lib:.2} vs gap_mc_estimate, {worst_oracle:.2} vs path-conditioned oracle"),
    )
}
