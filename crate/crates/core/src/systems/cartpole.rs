use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::SimulatedData;
use crate::error::{GpssmError, Result};

/// Cart with a uniform pole, angle measured from upright, integrated with
/// semi-implicit Euler. The latent representation is
/// `(position, velocity, sin θ, cos θ, angular velocity)`; observations are
/// `(position, sin θ, cos θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleSystem {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    /// Initial `(position, velocity, θ, angular velocity)`.
    pub initial: [f64; 4],
    /// Standard deviation of noise added to `(velocity, angular velocity)` each step.
    pub process_sd: f64,
    pub obs_sd: f64,
}

const BLOW_UP: f64 = 1e6;

impl Default for CartPoleSystem {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            dt: 0.05,
            initial: [0.0, 0.0, std::f64::consts::PI, 0.0],
            process_sd: 0.0,
            obs_sd: 0.01,
        }
    }
}

impl CartPoleSystem {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.cart_mass, self.pole_mass, self.half_length, self.dt];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !self.gravity.is_finite() {
            return Err(GpssmError::InvalidParameter("masses, pole length and time step must be positive".into()));
        }
        if !(self.process_sd >= 0.0 && self.obs_sd >= 0.0) {
            return Err(GpssmError::InvalidParameter("noise standard deviations must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Accelerations `(ẍ, θ̈)` under horizontal force `force`.
    pub fn accelerations(&self, state: &[f64; 4], force: f64) -> (f64, f64) {
        let [_, _, th, om] = *state;
        let total = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        let (s, c) = th.sin_cos();
        let temp = (force + ml * om * om * s) / total;
        let th_acc = (self.gravity * s - c * temp) / (self.half_length * (4.0 / 3.0 - self.pole_mass * c * c / total));
        let x_acc = temp - ml * th_acc * c / total;
        (x_acc, th_acc)
    }

    /// One integration step.
    pub fn step(&self, state: &[f64; 4], force: f64) -> [f64; 4] {
        let (xa, ta) = self.accelerations(state, force);
        let v = state[1] + self.dt * xa;
        let om = state[3] + self.dt * ta;
        [state[0] + self.dt * v, v, state[2] + self.dt * om, om]
    }

    /// Kinetic plus potential energy of the cart and the uniform pole.
    pub fn energy(&self, state: &[f64; 4]) -> f64 {
        let [_, v, th, om] = *state;
        let l = self.half_length;
        let (s, c) = th.sin_cos();
        let vx = v + l * om * c;
        let vy = -l * om * s;
        0.5 * self.cart_mass * v * v
            + 0.5 * self.pole_mass * (vx * vx + vy * vy)
            + 0.5 * (self.pole_mass * l * l / 3.0) * om * om
            + self.pole_mass * self.gravity * l * c
    }

    pub fn latent(state: &[f64; 4]) -> [f64; 5] {
        let (s, c) = state[2].sin_cos();
        [state[0], state[1], s, c, state[3]]
    }

    /// Runs the system under `controls` (one force per step, applied on the
    /// transition into the corresponding state).
    pub fn simulate<R: Rng + ?Sized>(&self, controls: &DVector<f64>, rng: &mut R) -> Result<SimulatedData> {
        self.validate()?;
        let t_len = controls.len();
        let mut state = self.initial;
        let mut latent = DMatrix::zeros(t_len, 5);
        let mut obs = DMatrix::zeros(t_len, 3);
        for t in 0..t_len {
            state = self.step(&state, controls[t]);
            if self.process_sd > 0.0 {
                state[1] += self.process_sd * rng.sample::<f64, _>(StandardNormal);
                state[3] += self.process_sd * rng.sample::<f64, _>(StandardNormal);
            }
            if state.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
                return Err(GpssmError::Numerical {
                    term: "cart-pole simulation".into(),
                    detail: format!("state left the valid range at step {}: {state:?}", t + 1),
                });
            }
            let z = Self::latent(&state);
            for (j, v) in z.iter().enumerate() {
                latent[(t, j)] = *v;
            }
            for (j, k) in [0, 2, 3].into_iter().enumerate() {
                obs[(t, j)] = z[k] + self.obs_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(SimulatedData {
            latent,
            observations: obs,
            controls: Some(DMatrix::from_column_slice(t_len, 1, controls.as_slice())),
        })
    }
}

/// Piecewise-constant forces drawn uniformly from `[-amplitude, amplitude]`,
/// each held for `hold` steps.
pub fn random_controls<R: Rng + ?Sized>(t_len: usize, amplitude: f64, hold: usize, rng: &mut R) -> DVector<f64> {
    let hold = hold.max(1);
    let mut u = DVector::zeros(t_len);
    let mut current = 0.0;
    for t in 0..t_len {
        if t % hold == 0 {
            current = amplitude * (2.0 * rng.random::<f64>() - 1.0);
        }
        u[t] = current;
    }
    u
}
