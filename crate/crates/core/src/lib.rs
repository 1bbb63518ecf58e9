//! Adapter-tuned hierarchical encoder with interleaved auxiliary features for
//! ultrasound segmentation, with the autodiff, metric, data and training
//! machinery it needs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pca;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type SegModel32 = model::SegModel<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
