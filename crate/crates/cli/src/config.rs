//! Key-value run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment. Flag overrides are
//! applied on top of the file, and the fully resolved configuration is written
//! next to the outputs so a run can be repeated exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gpssm::predict::ForecastMethod;
use gpssm::sparse_gp::MeanFunction;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub verbose: bool,

    pub system: String,
    pub length: usize,
    pub process_sd: Option<f64>,
    pub obs_sd: Option<f64>,
    /// Transition coefficient of the linear system.
    pub linear_a: f64,
    pub control_amplitude: f64,
    pub control_hold: usize,

    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub resume: bool,

    pub latent_dim: Option<usize>,
    pub num_inducing: Option<usize>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub mean_fn: MeanFunction,
    pub warmup_iters: usize,
    pub prior_variance: f64,

    pub horizon: usize,
    pub methods: Vec<ForecastMethod>,
    pub n_traj: usize,
    pub prefix_len: Option<usize>,
    /// Forecast start in observation coordinates; skips filtering when set.
    pub start_obs: Option<Vec<f64>>,
    pub start_sd: f64,
    pub inner_iters: usize,

    pub dims: Vec<usize>,
    pub mc_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("."),
            verbose: false,
            system: "kink".into(),
            length: 600,
            process_sd: None,
            obs_sd: None,
            linear_a: 0.8,
            control_amplitude: 2.0,
            control_hold: 5,
            data: None,
            model: None,
            resume: false,
            latent_dim: None,
            num_inducing: None,
            max_iters: 1000,
            tolerance: 1e-8,
            mean_fn: MeanFunction::Zero,
            warmup_iters: 50,
            prior_variance: 1.0,
            horizon: 10,
            methods: vec![ForecastMethod::Sample, ForecastMethod::MomentMatch, ForecastMethod::Variational],
            n_traj: 1000,
            prefix_len: None,
            start_obs: None,
            start_sd: 1e-3,
            inner_iters: 2000,
            dims: vec![1, 2, 3, 4],
            mc_samples: 2000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("bad value '{value}' for '{key}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("bad value '{value}' for '{key}': expected true or false"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads `key = value` lines.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        parse_kv(&text)
    }

    /// Builds a configuration from defaults plus `entries`; unknown keys are rejected.
    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in entries {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "verbose" => self.verbose = parse_bool(key, v)?,
            "system" => self.system = v.to_string(),
            "length" => self.length = parse(key, v)?,
            "process_sd" => self.process_sd = Some(parse(key, v)?),
            "obs_sd" => self.obs_sd = Some(parse(key, v)?),
            "linear_a" => self.linear_a = parse(key, v)?,
            "control_amplitude" => self.control_amplitude = parse(key, v)?,
            "control_hold" => self.control_hold = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "model" => self.model = Some(PathBuf::from(v)),
            "resume" => self.resume = parse_bool(key, v)?,
            "latent_dim" => self.latent_dim = Some(parse(key, v)?),
            "num_inducing" => self.num_inducing = Some(parse(key, v)?),
            "max_iters" => self.max_iters = parse(key, v)?,
            "tolerance" => self.tolerance = parse(key, v)?,
            "mean_fn" => self.mean_fn = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "prior_variance" => self.prior_variance = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "methods" => {
                self.methods = parse_list(key, v)?;
                if self.methods.is_empty() {
                    return Err(CliError::Usage("methods: need at least one of sample, mm, variational".into()));
                }
            }
            "n_traj" => self.n_traj = parse(key, v)?,
            "prefix_len" => self.prefix_len = Some(parse(key, v)?),
            "start_obs" => self.start_obs = Some(parse_list(key, v)?),
            "start_sd" => self.start_sd = parse(key, v)?,
            "inner_iters" => self.inner_iters = parse(key, v)?,
            "dims" => self.dims = parse_list(key, v)?,
            "mc_samples" => self.mc_samples = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// All settings as `key = value` lines in a fixed order. Unset optional
    /// values are omitted.
    pub fn to_kv(&self) -> String {
        let mut lines: Vec<(&str, Option<String>)> = vec![
            ("seed", Some(self.seed.to_string())),
            ("out", Some(self.out.display().to_string())),
            ("verbose", Some(self.verbose.to_string())),
            ("system", Some(self.system.clone())),
            ("length", Some(self.length.to_string())),
            ("process_sd", self.process_sd.map(|v| v.to_string())),
            ("obs_sd", self.obs_sd.map(|v| v.to_string())),
            ("linear_a", Some(self.linear_a.to_string())),
            ("control_amplitude", Some(self.control_amplitude.to_string())),
            ("control_hold", Some(self.control_hold.to_string())),
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("model", self.model.as_ref().map(|p| p.display().to_string())),
            ("resume", Some(self.resume.to_string())),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("num_inducing", self.num_inducing.map(|v| v.to_string())),
            ("max_iters", Some(self.max_iters.to_string())),
            ("tolerance", Some(self.tolerance.to_string())),
            ("mean_fn", Some(mean_fn_tag(self.mean_fn).to_string())),
            ("warmup_iters", Some(self.warmup_iters.to_string())),
            ("prior_variance", Some(self.prior_variance.to_string())),
            ("horizon", Some(self.horizon.to_string())),
            ("methods", Some(join(&self.methods))),
            ("n_traj", Some(self.n_traj.to_string())),
            ("prefix_len", self.prefix_len.map(|v| v.to_string())),
            ("start_obs", self.start_obs.as_ref().map(|s| join(s))),
            ("start_sd", Some(self.start_sd.to_string())),
            ("inner_iters", Some(self.inner_iters.to_string())),
            ("dims", Some(join(&self.dims))),
            ("mc_samples", Some(self.mc_samples.to_string())),
        ];
        lines.retain(|(_, v)| v.is_some());
        lines.iter().map(|(k, v)| format!("{k} = {}\n", v.as_deref().unwrap_or_default())).collect()
    }
}

pub fn mean_fn_tag(m: MeanFunction) -> &'static str {
    match m {
        MeanFunction::Zero => "zero",
        MeanFunction::Identity => "identity",
    }
}
