pub mod elbo;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod kernel;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod optim;
pub mod params;
pub mod predict;
pub mod sparse_gp;
pub mod systems;
mod serde_mat;

pub use error::{GpssmError, Result};
