//! Sound event localization and detection with class-incremental learning
//! on synthetic first-order Ambisonics scenes.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision used by the experiment runner.

pub mod accdoa;
pub mod cil;
pub mod error;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod net;
mod rng;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};

/// Precision used for training and inference in experiments.
pub type Real = f32;
pub type Model = net::ModelParams<Real>;
pub type Features = features::FeatureTensor<Real>;
pub type Accdoa = accdoa::AccdoaTensor<Real>;
pub type TrainClip = cil::Clip<Real>;
