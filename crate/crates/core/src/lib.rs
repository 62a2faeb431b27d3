//! Probit classifier and uncertainty-guided box heads for incremental
//! few-shot detection, with a synthetic detection world to exercise them.

pub mod boxes;
pub mod classifier;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod manifest;
pub mod mask;
pub mod oracle;
pub mod probit;
pub mod protocol;
pub mod report;
pub mod scalar;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type Activation = probit::ActivationGaussian<f64>;
pub type ActivationF32 = probit::ActivationGaussian<f32>;
pub type Posterior = classifier::ClassWeightPosterior<f64>;
pub type PosteriorF32 = classifier::ClassWeightPosterior<f32>;
pub type BoxHead = boxes::BoxHeadParams<f64>;
pub type BoxHeadF32 = boxes::BoxHeadParams<f32>;
pub type MaskHead = mask::MaskHeadParams<f64>;
pub type MaskHeadF32 = mask::MaskHeadParams<f32>;
