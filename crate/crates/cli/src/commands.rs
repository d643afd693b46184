//! The five verbs. Each takes a resolved [`RunConfig`], writes its outputs
//! under `out`, and persists the configuration it actually ran with.

use std::path::PathBuf;

use gpssm::elbo::{elbo, elbo_with, emission_expectation, kzz_condition_ok, transition_expectation, QuMode};
use gpssm::fit::{best_dim, dim_sweep, fit, fit_from, FitConfig, FitResult};
use gpssm::gaussian::GaussianDist;
use gpssm::model::{GpssmModel, Sequence};
use gpssm::optim::LbfgsConfig;
use gpssm::predict::{
    filter, gap_mc_estimate, moment_match_forecast, prediction_gap, sample_forecast, variational_forecast,
    ForecastMethod, ForecastResult,
};
use gpssm::systems::{random_controls, CartPoleSystem, KinkSystem, LinearSsm, SimulatedData};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{fmt_f64, Dataset, Snapshot, Table, TrainingInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Predict,
    Dimsweep,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Dimsweep => "dimsweep",
            Command::Diagnose => "diagnose",
        }
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    /// Human-readable summary lines for stdout.
    pub lines: Vec<String>,
    /// Set when a self-check failed; the run still wrote its outputs.
    pub failed_checks: usize,
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Report> {
    let mut resolved = cfg.clone();
    let mut report = match cmd {
        Command::Simulate => simulate(&mut resolved)?,
        Command::Fit => fit_cmd(&mut resolved)?,
        Command::Predict => predict(&mut resolved)?,
        Command::Dimsweep => dimsweep(&mut resolved)?,
        Command::Diagnose => diagnose(&mut resolved)?,
    };
    let path = resolved.out.join(format!("{}.conf", cmd.name()));
    crate::io::write_atomic(&path, resolved.to_kv().as_bytes())?;
    report.files.push(path);
    Ok(report)
}

fn log(cfg: &RunConfig, msg: impl AsRef<str>) {
    if cfg.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("'{key}' is required (set it in the config or with --{key})")))
}

fn simulate(cfg: &mut RunConfig) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.length == 0 {
        return Err(CliError::Usage("length must be at least 1".into()));
    }
    let data: SimulatedData = match cfg.system.as_str() {
        "kink" => {
            let (sx, sy) = (cfg.process_sd.unwrap_or(0.05), cfg.obs_sd.unwrap_or(0.2));
            (cfg.process_sd, cfg.obs_sd) = (Some(sx), Some(sy));
            KinkSystem::new(sx, sy)?.simulate(cfg.length, &mut rng)
        }
        "cartpole" => {
            let (sx, sy) = (cfg.process_sd.unwrap_or(0.0), cfg.obs_sd.unwrap_or(0.01));
            (cfg.process_sd, cfg.obs_sd) = (Some(sx), Some(sy));
            if cfg.control_hold == 0 {
                return Err(CliError::Usage("control_hold must be at least 1".into()));
            }
            let u = random_controls(cfg.length, cfg.control_amplitude, cfg.control_hold, &mut rng);
            let sys = CartPoleSystem { process_sd: sx, obs_sd: sy, ..CartPoleSystem::default() };
            sys.simulate(&u, &mut rng)?
        }
        "linear" => {
            let (sx, sy) = (cfg.process_sd.unwrap_or(0.3), cfg.obs_sd.unwrap_or(0.3));
            (cfg.process_sd, cfg.obs_sd) = (Some(sx), Some(sy));
            linear_system(cfg.linear_a, sx, sy)?.simulate(cfg.length, &mut rng)?
        }
        other => return Err(CliError::Usage(format!("unknown system '{other}' (expected kink, cartpole or linear)"))),
    };
    let ds = Dataset {
        time: (1..=data.len()).map(|t| t as f64).collect(),
        observations: data.observations,
        controls: data.controls,
        latent: Some(data.latent),
    };
    let path = cfg.out.join("data.csv");
    ds.write(&path)?;
    cfg.data = Some(path.clone());
    Ok(Report { files: vec![path], lines: vec![format!("simulated {} steps of '{}'", ds.len(), cfg.system)], ..Default::default() })
}

/// One-dimensional `x' = a x + N(0, sx²)`, `y = x + N(0, sy²)`, `x_0 ~ N(0, 1)`.
pub fn linear_system(a: f64, sx: f64, sy: f64) -> Result<LinearSsm> {
    let sys = LinearSsm {
        a: DMatrix::from_element(1, 1, a),
        b: DVector::zeros(1),
        q: DVector::from_element(1, sx * sx),
        c: DMatrix::from_element(1, 1, 1.0),
        d: DVector::zeros(1),
        r: DVector::from_element(1, sy * sy),
        prior: GaussianDist::isotropic(DVector::zeros(1), 1.0)?,
    };
    sys.validate()?;
    Ok(sys)
}

/// Fills in the inducing-point count if unset: 20 for one GP input, 100 otherwise.
fn fit_config(cfg: &mut RunConfig, seq: &Sequence, d: usize) -> FitConfig {
    let m = *cfg.num_inducing.get_or_insert(if d + seq.control_dim() == 1 { 20 } else { 100 });
    FitConfig {
        latent_dim: d,
        num_inducing: m,
        max_iters: cfg.max_iters,
        tolerance: cfg.tolerance,
        seed: cfg.seed,
        mean_fn: cfg.mean_fn,
        warmup_iters: cfg.warmup_iters,
        prior_variance: cfg.prior_variance,
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Sequence)> {
    let ds = Dataset::read(require(&cfg.data, "data")?)?;
    let seq = ds.sequence()?;
    Ok((ds, seq))
}

fn fit_log(res: &FitResult) -> Table {
    let mut t = Table::new([
        "iteration",
        "elbo",
        "emission",
        "transition",
        "prior",
        "entropy",
        "kl_u",
        "grad_norm",
    ]);
    for e in &res.trace {
        let x = e.terms;
        t.push(vec![
            e.iteration.to_string(),
            fmt_f64(x.total),
            fmt_f64(x.emission),
            fmt_f64(x.transition),
            fmt_f64(x.prior),
            fmt_f64(x.entropy),
            fmt_f64(x.kl_u),
            fmt_f64(e.grad_norm),
        ]);
    }
    t
}

fn fit_cmd(cfg: &mut RunConfig) -> Result<Report> {
    let (_, seq) = load_data(cfg)?;
    let res = if cfg.resume {
        let snap = Snapshot::read(require(&cfg.model, "model")?)?;
        cfg.latent_dim = Some(snap.model.state_dim());
        cfg.num_inducing = Some(snap.model.inducing.len());
        cfg.mean_fn = snap.model.mean_fn;
        let fc = FitConfig { warmup_iters: 0, ..fit_config(cfg, &seq, snap.model.state_dim()) };
        log(cfg, format!("resuming from ELBO {}", snap.training.elbo));
        fit_from(snap.model, &seq, &fc)?
    } else {
        let d = *cfg.latent_dim.get_or_insert(seq.obs_dim());
        let fc = fit_config(cfg, &seq, d);
        log(cfg, format!("fitting D={} M={} on {} steps", fc.latent_dim, fc.num_inducing, seq.len()));
        fit(&seq, &fc)?
    };
    for e in &res.trace {
        log(cfg, format!("iter {:>5}  elbo {:.6}  |g| {:.3e}", e.iteration, e.terms.total, e.grad_norm));
    }
    let info = TrainingInfo {
        elbo: res.terms.total,
        terms: res.terms,
        iterations: res.iterations,
        converged: res.converged,
        seed: cfg.seed,
    };
    let snap_path = cfg.out.join("model.json");
    let log_path = cfg.out.join("fit_log.csv");
    fit_log(&res).write(&log_path)?;
    Snapshot::new(res.model, info).write(&snap_path)?;
    Ok(Report {
        files: vec![snap_path, log_path],
        lines: vec![format!(
            "ELBO {} after {} iterations ({})",
            res.terms.total,
            res.iterations,
            if res.converged { "converged" } else { "not converged" }
        )],
        ..Default::default()
    })
}

fn inner_cfg(cfg: &RunConfig) -> LbfgsConfig {
    LbfgsConfig { max_iters: cfg.inner_iters, ..LbfgsConfig::default() }
}

/// Gaussian over latent states whose push-forward has mean `y` and spread
/// `sd` along observed directions; unobserved directions get variance `sd²`.
pub fn start_from_observation(model: &GpssmModel, y: &[f64], sd: f64) -> Result<GaussianDist> {
    let p = model.obs_dim();
    if y.len() != p {
        return Err(CliError::Usage(format!("start_obs has {} values, the model observes {p}", y.len())));
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(CliError::Usage("start_sd must be positive".into()));
    }
    let c = model.emission.c();
    let pinv = c.clone().pseudo_inverse(1e-12).map_err(|e| CliError::Numerical(e.to_string()))?;
    let resid = DVector::from_column_slice(y) - model.emission.offset();
    let mean = &pinv * resid;
    let d = model.state_dim();
    let null = DMatrix::identity(d, d) - &pinv * c;
    let cov = (&pinv * pinv.transpose() + &null * null.transpose()) * (sd * sd);
    Ok(GaussianDist::from_covariance(mean, &cov)?)
}

fn forecast_table(f: &ForecastResult, t0: usize) -> Table {
    let d = f.state_means.first().map_or(0, |m| m.len());
    let p = f.obs_means.first().map_or(0, |m| m.len());
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((1..=d).map(|i| format!("x_mean_{i}")));
    header.extend((1..=d).map(|i| format!("x_var_{i}")));
    header.extend((1..=p).map(|i| format!("y_mean_{i}")));
    header.extend((1..=p).map(|i| format!("y_var_{i}")));
    let mut t = Table::new(header);
    for k in 0..f.horizon() {
        let mut row = vec![(k + 1).to_string(), (t0 + k + 1).to_string()];
        row.extend(f.state_means[k].iter().map(|v| fmt_f64(*v)));
        row.extend(f.state_covs[k].diagonal().iter().map(|v| fmt_f64(*v)));
        row.extend(f.obs_means[k].iter().map(|v| fmt_f64(*v)));
        row.extend(f.obs_covs[k].diagonal().iter().map(|v| fmt_f64(*v)));
        t.push(row);
    }
    t
}

fn predict(cfg: &mut RunConfig) -> Result<Report> {
    let snap = Snapshot::read(require(&cfg.model, "model")?)?;
    let model = &snap.model;
    let data = match &cfg.data {
        Some(p) => Some(Dataset::read(p)?),
        None => None,
    };
    let mut report = Report::default();
    let (start, t0) = match (&cfg.start_obs, &data) {
        (Some(y), _) => (start_from_observation(model, y, cfg.start_sd)?, cfg.prefix_len.unwrap_or(0)),
        (None, Some(ds)) => {
            let seq = ds.sequence()?;
            let t0 = *cfg.prefix_len.get_or_insert(seq.len());
            let prefix = seq.prefix(t0)?;
            let filtered = filter(model, &prefix, &inner_cfg(cfg))?;
            log(cfg, format!("filtered {t0} steps, bound {}", filtered.terms.total));
            let marg = filtered.chain.marginals();
            let d = model.state_dim();
            let p = model.obs_dim();
            let mut header = vec!["time".to_string()];
            header.extend((1..=d).map(|i| format!("x_mean_{i}")));
            header.extend((1..=d).map(|i| format!("x_var_{i}")));
            header.extend((1..=p).map(|i| format!("y_mean_{i}")));
            header.extend((1..=p).map(|i| format!("y_var_{i}")));
            let mut table = Table::new(header);
            for t in 0..=t0 {
                let (ym, yc) = model.emission.push_forward(&marg.means[t], &marg.covs[t]);
                let mut row = vec![t.to_string()];
                row.extend(marg.means[t].iter().map(|v| fmt_f64(*v)));
                row.extend(marg.covs[t].diagonal().iter().map(|v| fmt_f64(*v)));
                row.extend(ym.iter().map(|v| fmt_f64(*v)));
                row.extend(yc.diagonal().iter().map(|v| fmt_f64(*v)));
                table.push(row);
            }
            let path = cfg.out.join("filtered.csv");
            table.write(&path)?;
            report.files.push(path);
            (filtered.last_state()?, t0)
        }
        (None, None) => return Err(CliError::Usage("predict needs either 'data' or 'start_obs'".into())),
    };
    let horizon = cfg.horizon;
    let controls = if model.control_dim > 0 && horizon > 0 {
        let u = data.as_ref().and_then(|d| d.controls.as_ref()).ok_or_else(|| {
            CliError::Usage("this model takes controls; the dataset must provide them for the forecast window".into())
        })?;
        if u.nrows() < t0 + horizon {
            return Err(CliError::Usage(format!(
                "dataset has controls for {} steps, the forecast needs {}",
                u.nrows(),
                t0 + horizon
            )));
        }
        Some(u.rows(t0, horizon).into_owned())
    } else {
        None
    };
    let controls = controls.as_ref();
    for method in cfg.methods.clone() {
        let path = cfg.out.join(format!("forecast_{}.csv", method.tag()));
        match method {
            ForecastMethod::Sample => {
                if cfg.n_traj == 0 {
                    return Err(CliError::Usage("n_traj must be at least 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let s = sample_forecast(model, &start, horizon, controls, cfg.n_traj, &mut rng)?;
                forecast_table(&s.summary, t0).write(&path)?;
                let d = model.state_dim();
                let p = model.obs_dim();
                let mut header = vec!["trajectory".to_string(), "step".to_string(), "time".to_string()];
                header.extend((1..=d).map(|i| format!("x_{i}")));
                header.extend((1..=p).map(|i| format!("y_{i}")));
                let mut traj = Table::new(header);
                for (n, (xs, ys)) in s.states.iter().zip(&s.observations).enumerate() {
                    for k in 0..horizon {
                        let mut row = vec![(n + 1).to_string(), (k + 1).to_string(), (t0 + k + 1).to_string()];
                        row.extend(xs[k].iter().map(|v| fmt_f64(*v)));
                        row.extend(ys[k].iter().map(|v| fmt_f64(*v)));
                        traj.push(row);
                    }
                }
                let tpath = cfg.out.join("trajectories.csv");
                traj.write(&tpath)?;
                report.files.push(tpath);
            }
            ForecastMethod::MomentMatch => {
                let f = moment_match_forecast(model, &start, horizon, controls, true)?;
                forecast_table(&f, t0).write(&path)?;
            }
            ForecastMethod::Variational => {
                let v = variational_forecast(model, &start, horizon, controls, &inner_cfg(cfg))?;
                forecast_table(&v.forecast, t0).write(&path)?;
                let mut gap = Table::new(["horizon", "gap", "gap_per_step", "iterations", "fell_back"]);
                gap.push(vec![
                    horizon.to_string(),
                    fmt_f64(v.gap + 0.0),
                    fmt_f64(v.gap_per_step + 0.0),
                    v.iterations.to_string(),
                    v.fell_back.to_string(),
                ]);
                let gpath = cfg.out.join("gap_report.csv");
                gap.write(&gpath)?;
                report.files.push(gpath);
                report.lines.push(format!("prediction gap {} ({} per step)", v.gap + 0.0, v.gap_per_step + 0.0));
            }
        }
        report.files.push(path);
    }
    Ok(report)
}

fn dimsweep(cfg: &mut RunConfig) -> Result<Report> {
    let (_, seq) = load_data(cfg)?;
    if cfg.dims.is_empty() || cfg.dims.contains(&0) {
        return Err(CliError::Usage("dims must list latent dimensions ≥ 1".into()));
    }
    cfg.latent_dim = None;
    let mut dims = cfg.dims.clone();
    dims.sort_unstable();
    dims.dedup();
    cfg.dims = dims.clone();
    // one inducing count for the whole sweep so the entries are comparable
    let base = fit_config(cfg, &seq, dims[0]);
    let entries = dim_sweep(&seq, &dims, &base);
    let best = best_dim(&entries);
    let mut t = Table::new(["latent_dim", "elbo", "iterations", "converged", "best", "error"]);
    let mut lines = Vec::new();
    for e in &entries {
        let row = match &e.outcome {
            Ok(r) => vec![
                e.latent_dim.to_string(),
                fmt_f64(r.terms.total),
                r.iterations.to_string(),
                r.converged.to_string(),
                (best == Some(e.latent_dim)).to_string(),
                String::new(),
            ],
            Err(msg) => vec![
                e.latent_dim.to_string(),
                "NaN".into(),
                "0".into(),
                "false".into(),
                "false".into(),
                msg.clone(),
            ],
        };
        lines.push(format!("D={} ELBO={}", row[0], row[1]));
        t.push(row);
    }
    let path = cfg.out.join("dimsweep.csv");
    t.write(&path)?;
    let Some(best) = best else {
        return Err(CliError::Numerical("every fit in the sweep failed; see dimsweep.csv".into()));
    };
    lines.push(format!("best latent dimension: {best}"));
    Ok(Report { files: vec![path], lines, ..Default::default() })
}

/// Outcome of one self-check: an analytic value against a Monte-Carlo
/// reference with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub std_err: f64,
    pub pass: bool,
}

impl Check {
    fn within(name: &str, value: f64, reference: f64, std_err: f64) -> Self {
        let tol = 3.0 * std_err + 1e-9 * (1.0 + value.abs());
        let pass = value.is_finite() && (value - reference).abs() <= tol;
        Self { name: name.into(), value, reference, std_err, pass }
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Monte-Carlo spot checks of the closed-form expectations and of the
/// prediction-gap identity on a trained model.
pub fn self_checks<R: Rng + ?Sized>(
    model: &GpssmModel,
    seq: &Sequence,
    horizon: usize,
    n: usize,
    inner: &LbfgsConfig,
    rng: &mut R,
) -> Result<Vec<Check>> {
    if n < 2 {
        return Err(CliError::Usage("mc_samples must be at least 2".into()));
    }
    let mut checks = Vec::new();
    let marg = model.q_x.marginals();
    let y = seq.observations();
    let emission = &model.emission;
    let analytic = emission_expectation(&marg, emission, y);
    let r = emission.noise_var();
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let xs = model.q_x.sample_trajectory(rng);
        let mut total = 0.0;
        for t in 1..=seq.len() {
            let mean = emission.c() * &xs[t] + emission.offset();
            for i in 0..emission.obs_dim() {
                let v = y[(t - 1, i)];
                if v.is_nan() {
                    continue;
                }
                total += -0.5 * (2.0 * std::f64::consts::PI * r[i]).ln() - (v - mean[i]).powi(2) / (2.0 * r[i]);
            }
        }
        draws.push(total);
    }
    let (m, se) = mean_se(&draws);
    checks.push(Check::within("emission_expectation", analytic, m, se));

    let gp = model.transition_gp()?;
    let analytic = transition_expectation(model, seq, &model.q_u)?;
    let q = &model.process_noise;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let xs = model.q_x.sample_trajectory(rng);
        let mut total = 0.0;
        for t in 1..=seq.len() {
            let input = match seq.controls() {
                None => xs[t - 1].clone(),
                Some(u) => DVector::from_iterator(
                    xs[t - 1].len() + u.ncols(),
                    xs[t - 1].iter().copied().chain(u.row(t - 1).iter().copied()),
                ),
            };
            let (fm, fv) = gp.conditional_moments(&input)?;
            for i in 0..q.len() {
                total += -0.5 * (2.0 * std::f64::consts::PI * q[i]).ln()
                    - ((xs[t][i] - fm[i]).powi(2) + fv[i]) / (2.0 * q[i]);
            }
        }
        draws.push(total);
    }
    let (m, se) = mean_se(&draws);
    checks.push(Check::within("transition_expectation", analytic, m, se));

    let last = marg.marginal(seq.len())?;
    let input = match seq.controls() {
        None => last.clone(),
        Some(u) => {
            let du = u.ncols();
            let d = last.dim();
            let mut mean = DVector::zeros(d + du);
            mean.rows_mut(0, d).copy_from(last.mean());
            mean.rows_mut(d, du).copy_from(&u.row(seq.len() - 1).transpose());
            let mut cov = DMatrix::identity(d + du, d + du) * 1e-12;
            cov.view_mut((0, 0), (d, d)).copy_from(&last.covariance());
            GaussianDist::from_covariance(mean, &cov)?
        }
    };
    let mm = gp.uncertain_conditional_moments(&input, true)?;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let (fm, _) = gp.conditional_moments(&input.sample(rng))?;
        draws.push(fm[0]);
    }
    let (m, se) = mean_se(&draws);
    checks.push(Check::within("uncertain_mean", mm.mean[0], m, se));

    let p = horizon.clamp(1, 5);
    let controls = match seq.controls() {
        Some(u) if u.nrows() >= p => Some(u.rows(u.nrows() - p, p).into_owned()),
        Some(_) => None,
        None => None,
    };
    if model.control_dim == 0 || controls.is_some() {
        let v = variational_forecast(model, &last, p, controls.as_ref(), inner)?;
        let gap = prediction_gap(model, &last, &v.chain, controls.as_ref())?;
        let (est, se) = gap_mc_estimate(model, &last, &v.chain, controls.as_ref(), n, rng)?;
        checks.push(Check::within("gap_identity", gap, est, se));
    }
    Ok(checks)
}

fn diagnose(cfg: &mut RunConfig) -> Result<Report> {
    let snap = Snapshot::read(require(&cfg.model, "model")?)?;
    let (_, seq) = load_data(cfg)?;
    let mut model = snap.model.clone();
    if model.check_sequence(&seq).is_err() {
        log(cfg, "dataset differs from the training data; filtering a fresh q(x)");
        model.q_x = filter(&model, &seq, &inner_cfg(cfg))?.chain;
    }
    model.check_sequence(&seq)?;
    let collapsed = elbo(&model, &seq)?;
    let fixed = elbo_with(&model, &seq, QuMode::Fixed(&model.q_u))?;
    let mut lines = Vec::new();
    lines.push(format!("stored_elbo {}", fmt_f64(snap.training.elbo)));
    for (label, t) in [("collapsed", collapsed), ("fixed_qu", fixed)] {
        lines.push(format!(
            "terms {label} emission={} transition={} prior={} entropy={} kl_u={} total={}",
            fmt_f64(t.emission),
            fmt_f64(t.transition),
            fmt_f64(t.prior),
            fmt_f64(t.entropy),
            fmt_f64(t.kl_u),
            fmt_f64(t.total)
        ));
    }
    let mut failed = 0;
    let cond_ok = kzz_condition_ok(&model);
    lines.push(format!("check kzz_factorizes {}", if cond_ok { "pass" } else { "fail" }));
    failed += usize::from(!cond_ok);
    let bound_ok = collapsed.total >= fixed.total - 1e-7 * (1.0 + fixed.total.abs());
    lines.push(format!("check collapsed_dominates_fixed {}", if bound_ok { "pass" } else { "fail" }));
    failed += usize::from(!bound_ok);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for c in self_checks(&model, &seq, cfg.horizon, cfg.mc_samples, &inner_cfg(cfg), &mut rng)? {
        lines.push(format!(
            "check {} {} value={} reference={} se={}",
            c.name,
            if c.pass { "pass" } else { "fail" },
            fmt_f64(c.value),
            fmt_f64(c.reference),
            fmt_f64(c.std_err)
        ));
        failed += usize::from(!c.pass);
    }
    let path = cfg.out.join("diagnose.txt");
    let mut text = lines.join("\n");
    text.push('\n');
    crate::io::write_atomic(&path, text.as_bytes())?;
    Ok(Report { files: vec![path], lines, failed_checks: failed })
}
