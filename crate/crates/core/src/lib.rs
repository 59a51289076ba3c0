//! Parameter-server local SGD with age-based worker selection.
//!
//! The crate simulates a parameter server that, every round, picks a subset
//! of workers, lets each of them run a few local SGD steps from the current
//! global model, and averages the uploaded models. Four selection strategies
//! are provided: [`StrategyKind::AgeSel`], which forces workers that have sat
//! out for too many rounds back in, plus FedAvg weighted sampling, an
//! update-norm based selector (OCS) and round robin.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the simulator and
//! the CLI use.

pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod theory;

pub use error::{Error, Result};
pub use rng::{Purpose, RandomStream};
pub use scalar::Scalar;
pub use selection::{AgeVector, SelectionOutcome, StrategyConfig, StrategyKind};

pub use model::{ModelKind, ModelSpec};

/// Model parameters in double precision.
pub type ParamVector = model::Params<f64>;
/// A labelled example in double precision.
pub type Sample = model::Sample<f64>;
/// A full dataset in double precision.
pub type GlobalDataset = data::GlobalDataset<f64>;
/// One worker's share of the training data in double precision.
pub type DataShard = data::DataShard<f64>;
