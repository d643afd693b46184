use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpssm_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "gpssm", version, about = "Gaussian process state-space models: simulate, fit, forecast, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate a kink, cart-pole or linear system and write a dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// kink, cartpole or linear
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train a model on a dataset and write a snapshot plus iteration log.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the snapshot given by --model.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        latent_dim: Option<usize>,
    },
    /// Filter on a prefix and forecast ahead.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Comma-separated subset of sample,mm,variational
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        prefix_len: Option<usize>,
    },
    /// Fit one model per latent dimension and report the ELBO of each.
    Dimsweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated latent dimensions
        #[arg(long)]
        dims: Option<String>,
    },
    /// Report the bound's terms and run Monte-Carlo self-checks on a model.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    verbose: bool,
    /// Override any configuration key, e.g. --set max_iters=200
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn build(cli: Cli) -> Result<(Command, RunConfig), CliError> {
    let mut overrides: Vec<(&str, Option<String>)> = Vec::new();
    let (cmd, common) = match &cli.command {
        Verb::Simulate { common, system, length } => {
            overrides.push(("system", system.clone()));
            overrides.push(("length", length.map(|v| v.to_string())));
            (Command::Simulate, common)
        }
        Verb::Fit { common, data, resume, model, latent_dim } => {
            overrides.push(("data", path(data)));
            overrides.push(("model", path(model)));
            overrides.push(("resume", resume.then(|| "true".to_string())));
            overrides.push(("latent_dim", latent_dim.map(|v| v.to_string())));
            (Command::Fit, common)
        }
        Verb::Predict { common, model, data, horizon, methods, n_traj, prefix_len } => {
            overrides.push(("model", path(model)));
            overrides.push(("data", path(data)));
            overrides.push(("horizon", horizon.map(|v| v.to_string())));
            overrides.push(("methods", methods.clone()));
            overrides.push(("n_traj", n_traj.map(|v| v.to_string())));
            overrides.push(("prefix_len", prefix_len.map(|v| v.to_string())));
            (Command::Predict, common)
        }
        Verb::Dimsweep { common, data, dims } => {
            overrides.push(("data", path(data)));
            overrides.push(("dims", dims.clone()));
            (Command::Dimsweep, common)
        }
        Verb::Diagnose { common, model, data } => {
            overrides.push(("model", path(model)));
            overrides.push(("data", path(data)));
            (Command::Diagnose, common)
        }
    };
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_entries(&RunConfig::load(p)?)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    overrides.push(("seed", common.seed.map(|v| v.to_string())));
    overrides.push(("out", path(&common.out)));
    overrides.push(("verbose", common.verbose.then(|| "true".to_string())));
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok((cmd, cfg))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = build(cli).and_then(|(cmd, cfg)| run(cmd, &cfg));
    match result {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if report.failed_checks > 0 {
                eprintln!("error: {} self-check(s) failed", report.failed_checks);
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
