//! Limited-memory BFGS ascent with backtracking line search.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{GpssmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub history: usize,
    /// Stop when the objective improves by less than `rel_tol · (1 + |f|)`
    /// for `patience` consecutive iterations.
    pub rel_tol: f64,
    pub patience: usize,
    pub grad_tol: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 500, history: 10, rel_tol: 1e-9, patience: 5, grad_tol: 1e-6, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    SmallGradient,
    MaxIterations,
    LineSearchFailed,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult<E> {
    pub theta: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub extra: E,
    pub iterations: usize,
    pub reason: StopReason,
}

/// Maximizes `f`. The objective returns value, gradient, and an arbitrary
/// payload handed to `on_iter` for every accepted iterate (iteration 0 is the
/// starting point). Failed evaluations during the line search count as
/// rejected steps; a failure at the starting point is returned as an error.
pub fn maximize<E, F, C>(mut f: F, theta0: DVector<f64>, cfg: &LbfgsConfig, mut on_iter: C) -> Result<OptimResult<E>>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>, E)>,
    C: FnMut(&IterationRecord, &E),
{
    let (mut value, mut grad, mut extra) = f(&theta0)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(GpssmError::Numerical {
            term: "objective".into(),
            detail: "non-finite value or gradient at the starting point".into(),
        });
    }
    let mut theta = theta0;
    on_iter(&IterationRecord { iteration: 0, value, grad_norm: grad.norm(), step: 0.0 }, &extra);
    let mut memory: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut stalls = 0;
    let mut reason = StopReason::MaxIterations;
    let mut iterations = 0;
    let mut retried = false;

    while iterations < cfg.max_iters {
        if grad.norm() <= cfg.grad_tol {
            reason = StopReason::SmallGradient;
            break;
        }
        let mut dir = two_loop(&grad, &memory);
        let mut slope = dir.dot(&grad);
        if !(slope > 0.0) || !slope.is_finite() {
            memory.clear();
            dir = grad.clone();
            slope = dir.dot(&grad);
        }
        let mut step = if memory.is_empty() { (1.0 / dir.amax()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let cand = &theta + &dir * step;
            if let Ok((v, g, e)) = f(&cand) {
                if v.is_finite() && g.iter().all(|x| x.is_finite()) && v >= value + 1e-4 * step * slope {
                    accepted = Some((cand, v, g, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, v, g, e)) = accepted else {
            if memory.is_empty() || retried {
                reason = StopReason::LineSearchFailed;
                break;
            }
            memory.clear();
            retried = true;
            continue;
        };
        retried = false;
        iterations += 1;
        let s = &cand - &theta;
        // ascent on f is descent on -f: y = ∇(-f)_new - ∇(-f)_old
        let y = &grad - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            memory.push_back((s, y, 1.0 / sy));
            if memory.len() > cfg.history {
                memory.pop_front();
            }
        }
        let improvement = v - value;
        theta = cand;
        value = v;
        grad = g;
        extra = e;
        on_iter(&IterationRecord { iteration: iterations, value, grad_norm: grad.norm(), step }, &extra);
        if improvement < cfg.rel_tol * (1.0 + value.abs()) {
            stalls += 1;
            if stalls >= cfg.patience {
                reason = StopReason::Converged;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Ok(OptimResult { theta, value, gradient: grad, extra, iterations, reason })
}

/// Two-loop recursion on the negated objective; returns an ascent direction.
fn two_loop(grad: &DVector<f64>, memory: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    q
}
