//! Text image inpainting laboratory.
//!
//! Builds corrupted/intact text-image training tuples from procedural
//! corrosion masks, trains a segmentation-guided diffusion restorer on them
//! and scores the results with image-quality and recognition metrics.

pub mod corrosion;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imgcore;
pub mod nnkit;
pub mod scalar;
pub mod spm;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageF32 = imgcore::ImageTensor<f32>;
pub type ImageF64 = imgcore::ImageTensor<f64>;
pub type SegMapF32 = imgcore::SegMap<f32>;
pub type SegMapF64 = imgcore::SegMap<f64>;
pub type TensorF32 = nnkit::Tensor<f32>;
pub type TensorF64 = nnkit::Tensor<f64>;
pub type ParamsF32 = nnkit::ParamStore<f32>;
pub type ParamsF64 = nnkit::ParamStore<f64>;
pub type SpmModelF32 = spm::SpmModel<f32>;
pub type SpmModelF64 = spm::SpmModel<f64>;
pub type RmModelF32 = diffusion::RmModel<f32>;
pub type RmModelF64 = diffusion::RmModel<f64>;
