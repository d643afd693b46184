//! Model containers: emission model, training sequence, and the full GPSSM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpssmError, Result};
use crate::gaussian::GaussianDist;
use crate::kernel::ArdRbfKernel;
use crate::markov::GaussMarkovChain;
use crate::sparse_gp::{InducingSet, MeanFunction, SparseGpPosterior, TransitionGp};

/// Linear-Gaussian emission `y = C x + d + ε`, `ε ~ N(0, diag(R))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmission", into = "RawEmission")]
pub struct EmissionModel {
    c: DMatrix<f64>,
    offset: DVector<f64>,
    noise_var: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawEmission {
    #[serde(with = "crate::serde_mat::mat")]
    c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vec")]
    offset: DVector<f64>,
    #[serde(with = "crate::serde_mat::vec")]
    noise_var: DVector<f64>,
}

impl TryFrom<RawEmission> for EmissionModel {
    type Error = GpssmError;
    fn try_from(r: RawEmission) -> Result<Self> {
        EmissionModel::new(r.c, r.offset, r.noise_var)
    }
}

impl From<EmissionModel> for RawEmission {
    fn from(e: EmissionModel) -> Self {
        RawEmission { c: e.c, offset: e.offset, noise_var: e.noise_var }
    }
}

impl EmissionModel {
    pub fn new(c: DMatrix<f64>, offset: DVector<f64>, noise_var: DVector<f64>) -> Result<Self> {
        if c.nrows() != offset.len() || c.nrows() != noise_var.len() {
            return Err(GpssmError::DimensionMismatch(format!(
                "emission matrix {:?}, offset {}, noise {}",
                c.shape(),
                offset.len(),
                noise_var.len()
            )));
        }
        if noise_var.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(GpssmError::InvalidParameter("emission noise variances must be positive".into()));
        }
        if c.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(GpssmError::InvalidParameter("non-finite emission parameters".into()));
        }
        Ok(Self { c, offset, noise_var })
    }

    /// `C = I`, `d = 0`.
    pub fn identity(dim: usize, noise_var: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim), DVector::zeros(dim), DVector::from_element(dim, noise_var))
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn noise_var(&self) -> &DVector<f64> {
        &self.noise_var
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    /// Observation moments implied by a state Gaussian.
    pub fn push_forward(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = &self.c * mean + &self.offset;
        let mut s = &self.c * cov * self.c.transpose();
        for i in 0..s.nrows() {
            s[(i, i)] += self.noise_var[i];
        }
        (m, s)
    }
}

/// An observed sequence `y_1..y_T` with optional control inputs.
///
/// Row `t` of `controls` is the input applied on the transition into state `t`.
/// Missing observation entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    observations: DMatrix<f64>,
    controls: Option<DMatrix<f64>>,
}

impl Sequence {
    pub fn new(observations: DMatrix<f64>, controls: Option<DMatrix<f64>>) -> Result<Self> {
        if let Some(u) = &controls {
            if u.nrows() != observations.nrows() {
                return Err(GpssmError::DimensionMismatch(format!(
                    "{} observation rows but {} control rows",
                    observations.nrows(),
                    u.nrows()
                )));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(GpssmError::InvalidParameter("controls must be finite".into()));
            }
        }
        if observations.iter().any(|v| v.is_infinite()) {
            return Err(GpssmError::InvalidParameter("observations must be finite or NaN".into()));
        }
        Ok(Self { observations, controls })
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn controls(&self) -> Option<&DMatrix<f64>> {
        self.controls.as_ref()
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.as_ref().map_or(0, |u| u.ncols())
    }

    /// First `len` rows.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len > self.len() {
            return Err(GpssmError::IndexOutOfRange { index: len, len: self.len() });
        }
        Self::new(
            self.observations.rows(0, len).into_owned(),
            self.controls.as_ref().map(|u| u.rows(0, len).into_owned()),
        )
    }

    /// Rows `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(GpssmError::IndexOutOfRange { index: start + len, len: self.len() });
        }
        Self::new(
            self.observations.rows(start, len).into_owned(),
            self.controls.as_ref().map(|u| u.rows(start, len).into_owned()),
        )
    }
}

/// The complete model: transition GP, noise, emission, state prior, and the
/// variational posteriors over states and inducing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct GpssmModel {
    pub kernels: Vec<ArdRbfKernel>,
    pub inducing: InducingSet,
    /// Diagonal of `Q`.
    #[serde(with = "crate::serde_mat::vec")]
    pub process_noise: DVector<f64>,
    pub emission: EmissionModel,
    pub state_prior: GaussianDist,
    pub q_x: GaussMarkovChain,
    /// `q(u)`, refreshed to the collapsed optimum after training.
    pub q_u: SparseGpPosterior,
    pub mean_fn: MeanFunction,
    pub control_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    kernels: Vec<ArdRbfKernel>,
    inducing: InducingSet,
    #[serde(with = "crate::serde_mat::vec")]
    process_noise: DVector<f64>,
    emission: EmissionModel,
    state_prior: GaussianDist,
    q_x: GaussMarkovChain,
    q_u: SparseGpPosterior,
    mean_fn: MeanFunction,
    control_dim: usize,
}

impl TryFrom<RawModel> for GpssmModel {
    type Error = GpssmError;
    fn try_from(r: RawModel) -> Result<Self> {
        let m = GpssmModel {
            kernels: r.kernels,
            inducing: r.inducing,
            process_noise: r.process_noise,
            emission: r.emission,
            state_prior: r.state_prior,
            q_x: r.q_x,
            q_u: r.q_u,
            mean_fn: r.mean_fn,
            control_dim: r.control_dim,
        };
        m.validate()?;
        Ok(m)
    }
}

impl From<GpssmModel> for RawModel {
    fn from(m: GpssmModel) -> Self {
        RawModel {
            kernels: m.kernels,
            inducing: m.inducing,
            process_noise: m.process_noise,
            emission: m.emission,
            state_prior: m.state_prior,
            q_x: m.q_x,
            q_u: m.q_u,
            mean_fn: m.mean_fn,
            control_dim: m.control_dim,
        }
    }
}

impl GpssmModel {
    pub fn state_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.control_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.emission.obs_dim()
    }

    /// Checks that all parts agree on dimensions and positivity.
    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        let din = self.input_dim();
        let mismatch = |what: &str| Err(GpssmError::DimensionMismatch(what.to_string()));
        if d == 0 {
            return mismatch("model needs at least one state dimension");
        }
        if self.kernels.iter().any(|k| k.input_dim() != din) || self.inducing.input_dim() != din {
            return mismatch("kernel / inducing input dimension");
        }
        if self.process_noise.len() != d {
            return mismatch("process noise length");
        }
        if self.process_noise.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(GpssmError::InvalidParameter("process noise variances must be positive".into()));
        }
        if self.emission.state_dim() != d || self.state_prior.dim() != d || self.q_x.dim() != d {
            return mismatch("state dimension of emission / prior / q(x)");
        }
        if self.q_u.output_dim() != d || self.q_u.num_inducing() != self.inducing.len() {
            return mismatch("q(u) shape");
        }
        Ok(())
    }

    /// Checks the model against a data sequence.
    pub fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.obs_dim() != self.obs_dim() {
            return Err(GpssmError::DimensionMismatch(format!(
                "sequence has {} observation columns, model expects {}",
                seq.obs_dim(),
                self.obs_dim()
            )));
        }
        if seq.control_dim() != self.control_dim {
            return Err(GpssmError::DimensionMismatch(format!(
                "sequence has {} control columns, model expects {}",
                seq.control_dim(),
                self.control_dim
            )));
        }
        if seq.len() != self.q_x.len() {
            return Err(GpssmError::DimensionMismatch(format!(
                "sequence has {} steps, q(x) has {}",
                seq.len(),
                self.q_x.len()
            )));
        }
        Ok(())
    }

    /// Transition GP using the stored `q(u)`.
    pub fn transition_gp(&self) -> Result<TransitionGp> {
        TransitionGp::new(self.kernels.clone(), self.inducing.clone(), self.q_u.clone(), self.mean_fn)
    }
}
