//! Function-space empirical Bayes training for small neural networks.
//!
//! The crate trains multilayer perceptrons under a prior placed on the
//! network's *outputs* rather than its weights: a frozen feature map
//! turns every batch of context points into a kernel, and the induced
//! quadratic form regularizes the live network's outputs at those
//! points. Alongside the function-space objectives it ships a classical
//! parameter-space MAP baseline, a dense-Jacobian reference estimator
//! for the corrected function-space posterior, synthetic and on-disk
//! datasets, corruption operators, and the evaluation metrics used to
//! compare the resulting predictive distributions.
//!
//! Everything numeric is generic over the scalar type through
//! [`num::Real`] (implemented for `f32` and `f64`); the aliases at the
//! crate root pin `f64`, which is also the precision of every file
//! format and reported metric. Randomness is fully seeded: one root seed
//! plus a fixed stream-derivation scheme pins every draw, so reruns are
//! bit-identical.

pub mod data;
pub mod error;
pub mod fsmap;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod num;
pub mod prior;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision gradient tape.
pub type Tape = tape::Tape<f64>;
/// Default-precision tape variable.
pub type Var = tape::Var<f64>;
/// Default-precision named gradients.
pub type Gradients = tape::Gradients<f64>;
/// Default-precision model parameters.
pub type ModelParams = model::ModelParams<f64>;
/// Default-precision frozen feature map.
pub type FeatureSnapshot = model::FeatureSnapshot<f64>;
/// Default-precision dataset.
pub type Dataset = data::Dataset<f64>;
/// Default-precision context distribution.
pub type ContextDistribution = data::ContextDistribution<f64>;
/// Default-precision context kernel.
pub type ContextKernel = prior::ContextKernel<f64>;
/// Default-precision prediction set.
pub type PredictionSet = metrics::PredictionSet<f64>;
/// Default-precision training outcome.
pub type TrainResult = train::TrainResult<f64>;
