//! Synthetic dynamical systems and an exact linear-Gaussian oracle.

mod cartpole;
mod kink;
mod linear;

pub use cartpole::{random_controls, CartPoleSystem};
pub use kink::{kink_transition, KinkSystem};
pub use linear::{kalman_smoother, KalmanPosterior, LinearSsm};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::Sequence;

/// A simulated run: latent states `x_1..x_T`, observations `y_1..y_T`, and the
/// controls applied on each transition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub latent: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub controls: Option<DMatrix<f64>>,
}

impl SimulatedData {
    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    pub fn to_sequence(&self) -> Result<Sequence> {
        Sequence::new(self.observations.clone(), self.controls.clone())
    }
}
