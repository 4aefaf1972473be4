//! Minimal tensor and reverse-mode autodiff engine for the encoders.
//!
//! Dense row-major tensors, a per-forward-pass [`Graph`] that records
//! operations, and gemm-backed kernels (convolution via im2col, fused
//! attention and LSTM). Generic over `f32` and `f64`.

mod attention;
mod conv;
pub mod float;
pub mod gemm;
pub mod layers;
mod lstm;
mod norm;
mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use float::{DType, Float};
pub use norm::BatchNormParams;
pub use ops::ZeroNormRow;
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Graph, Mode, Var};
pub use tensor::Tensor;
