//! Echo state network toolkit: identification of SISO systems with a sparse
//! random reservoir and trained linear readout, incremental-stability
//! certificates, LASSO-driven state pruning and offset-free model predictive
//! control, with a pH neutralization benchmark plant.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the experiment pipeline uses.

pub mod error;
pub mod experiment;
pub mod ident;
pub mod model;
pub mod mpc;
pub mod plant;
pub mod reduce;
pub mod reservoir;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Reservoir = reservoir::ReservoirWeights<f64>;
pub type State = reservoir::EsnState<f64>;
pub type Certificate = reservoir::StabilityCertificate<f64>;
pub type Readout = ident::ReadoutWeights<f64>;
pub type Data = ident::Dataset<f64>;
pub type Regressors = ident::RegressorMatrix<f64>;
pub type Model = model::EsnModel<f64>;
