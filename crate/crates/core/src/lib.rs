//! Self-supervised latent motion trajectories for cardiac phase detection.
//!
//! A registration-trained encoder/decoder maps each frame to a velocity
//! field toward a virtual reference. Per-frame latents split into a static
//! part shared by the clip and a motion part confined to a learned
//! low-dimensional orthonormal subspace; the motion coordinates over time
//! form a trajectory whose turning points mark end-diastole and end-systole.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the training precision.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod diffeo;
pub mod error;
pub mod eval;
pub mod field;
pub mod model;
pub mod optim;
pub mod phase;
pub mod pipeline;
pub mod scalar;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = field::Image<f32>;
pub type Video32 = video::Video<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type VelocityField32 = field::VelocityField<f32>;
pub type DisplacementField32 = field::DisplacementField<f32>;
