//! Dense tensors with reverse-mode automatic differentiation.

mod data;
pub mod grad_check;
pub mod kernels;
mod tape;

pub use data::TensorData;
pub use tape::{OpRecord, Tape, Tensor};

#[cfg(test)]
mod tests;
