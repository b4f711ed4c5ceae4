//! Siamese hyperspectral change detection with channel-distilling
//! self-attention, trained with a hybrid supervised-contrastive +
//! cross-entropy objective, plus the classical CVA and ISFA baselines.
//!
//! The numeric core (tensors, network, losses) is generic over the scalar
//! type via [`scalar::Scalar`]; the shipped pipeline is pinned to `f64`
//! through the aliases below.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 tensor value, the pipeline default.
pub type TensorData64 = tensor::TensorData<f64>;
/// f64 gradient tape.
pub type Tape64 = tensor::Tape<f64>;
/// f64 tensor handle.
pub type Tensor64 = tensor::Tensor<f64>;

/// f32 variants for callers trading precision for speed.
pub type TensorData32 = tensor::TensorData<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
