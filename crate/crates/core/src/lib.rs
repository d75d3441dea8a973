//! Calibration-guided domain adaptation for image classifiers.
//!
//! A small labeled calibration set from the target domain is split into
//! meta-domains; source images are pushed toward each one with fitted
//! color and blur transforms, and the classifier is tuned with a loss
//! that also scores one-step-adapted copies of itself.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod meta_domain;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type ParameterSetF32 = autodiff::ParameterSet<f32>;
pub type ParameterSetF64 = autodiff::ParameterSet<f64>;
