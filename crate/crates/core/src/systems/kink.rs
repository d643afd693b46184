use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::SimulatedData;
use crate::error::{GpssmError, Result};

/// `f(x) = 0.8 + (x + 0.2)(1 - 5 / (1 + e^{-2x}))`: slope one far to the left,
/// a sharp bend near the origin.
pub fn kink_transition(x: f64) -> f64 {
    0.8 + (x + 0.2) * (1.0 - 5.0 / (1.0 + (-2.0 * x).exp()))
}

/// One-dimensional system `x_{t+1} = f(x_t) + ε`, `y_t = x_t + ν`.
#[derive(Clone)]
pub struct KinkSystem {
    pub process_sd: f64,
    pub obs_sd: f64,
    pub initial_state: f64,
    transition: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for KinkSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KinkSystem")
            .field("process_sd", &self.process_sd)
            .field("obs_sd", &self.obs_sd)
            .field("initial_state", &self.initial_state)
            .finish_non_exhaustive()
    }
}

impl KinkSystem {
    pub fn new(process_sd: f64, obs_sd: f64) -> Result<Self> {
        if !(process_sd >= 0.0 && obs_sd >= 0.0 && process_sd.is_finite() && obs_sd.is_finite()) {
            return Err(GpssmError::InvalidParameter("noise standard deviations must be ≥ 0".into()));
        }
        Ok(Self { process_sd, obs_sd, initial_state: 0.0, transition: Arc::new(kink_transition) })
    }

    /// Replaces the transition function.
    pub fn with_transition(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.transition = Arc::new(f);
        self
    }

    pub fn transition(&self, x: f64) -> f64 {
        (self.transition)(x)
    }

    /// `T` steps starting from `initial_state`; row `t - 1` holds `x_t` and `y_t`.
    pub fn simulate<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> SimulatedData {
        let mut x = self.initial_state;
        let mut latent = DMatrix::zeros(t_len, 1);
        let mut obs = DMatrix::zeros(t_len, 1);
        for t in 0..t_len {
            x = self.transition(x) + self.process_sd * rng.sample::<f64, _>(StandardNormal);
            latent[(t, 0)] = x;
            obs[(t, 0)] = x + self.obs_sd * rng.sample::<f64, _>(StandardNormal);
        }
        SimulatedData { latent, observations: obs, controls: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_form_values() {
        assert!((kink_transition(0.0) - 0.5).abs() < 1e-15);
        // slope tends to one far to the left
        let x = -30.0;
        assert!((kink_transition(x + 1e-3) - kink_transition(x) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn override_is_used_verbatim() {
        let s = KinkSystem::new(0.0, 0.0).unwrap().with_transition(|x| 0.5 * x + 1.0);
        assert_eq!(s.transition(3.0), 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = s.simulate(3, &mut rng);
        assert_eq!(d.latent.as_slice(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn noiseless_orbit_and_reproducibility() {
        let s = KinkSystem::new(0.0, 0.0).unwrap();
        let d = s.simulate(5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut x = 0.0;
        for t in 0..5 {
            x = kink_transition(x);
            assert_eq!(d.latent[(t, 0)], x);
            assert_eq!(d.observations[(t, 0)], x);
        }
        let noisy = KinkSystem::new(0.05, 0.2).unwrap();
        let a = noisy.simulate(50, &mut ChaCha8Rng::seed_from_u64(2));
        let b = noisy.simulate(50, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_residual_matches_process_noise() {
        let s = KinkSystem::new(0.05, 0.2).unwrap();
        let d = s.simulate(10_000, &mut ChaCha8Rng::seed_from_u64(3));
        let resid: Vec<f64> = (1..d.len()).map(|t| d.latent[(t, 0)] - kink_transition(d.latent[(t - 1, 0)])).collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // standard error of a sample sd is about sd / sqrt(2n)
        assert!((sd - 0.05).abs() < 3.0 * 0.05 / (2.0 * n).sqrt(), "{sd}");
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(KinkSystem::new(-1.0, 0.1).is_err());
    }
}
