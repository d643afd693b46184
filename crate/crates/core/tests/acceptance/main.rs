//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p gpssm --test acceptance -- 3 7` runs a subset. The process
//! exits non-zero on any failure when `GPSSM_ACCEPTANCE_STRICT=1`; otherwise
//! failures are reported and the run still succeeds.

#[path = "../common/mod.rs"]
mod common;
mod experiments;
mod oracles;

use std::io::Write;
use std::time::Instant;

pub struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut kink = None;
    let mut results = Vec::new();
    let criteria: [(usize, &str); 10] = [
        (1, "closed-form expectations vs Monte Carlo"),
        (2, "bound gradient vs finite differences"),
        (3, "chain, smoother and optimal q(u) exactness"),
        (4, "linear system vs Kalman oracle"),
        (5, "kink transition recovery"),
        (6, "prediction gap ratio, nonlinear vs linear start"),
        (7, "prediction gap equals expected path KL"),
        (8, "cart-pole latent dimension sweep"),
        (9, "linear-time scaling in sequence length"),
        (10, "moment matching vs sampling"),
    ];
    for (n, name) in criteria {
        if !run(n) {
            continue;
        }
        let t = Instant::now();
        let mut shared = || kink.get_or_insert_with(experiments::near_noiseless_kink_model).clone();
        let out = match n {
            1 => oracles::c1_expectations(),
            2 => oracles::c2_gradients(),
            3 => oracles::c3_exactness(),
            4 => experiments::c4_linear(),
            5 => experiments::c5_kink_recovery(),
            6 => experiments::c6_gap_ratio(&shared()),
            7 => oracles::c7_gap_identity(),
            8 => experiments::c8_dim_sweep(),
            9 => experiments::c9_scaling(),
            _ => experiments::c10_moment_matching(&shared()),
        };
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict}  {name} [{:.1}s]: {}", t.elapsed().as_secs_f64(), out.detail);
        std::io::stdout().flush().ok();
        results.push((n, out.pass));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var("GPSSM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
