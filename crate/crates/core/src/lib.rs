//! Future-aware speculative decoding on a tiny decoder-only transformer.
//!
//! The target model runs learnable soft-prompt KV rows and "contemplate"
//! rows alongside ordinary tokens; the last-layer state of a contemplate row
//! is a future prediction that an EAGLE-style draft head conditions on as a
//! fixed trailing slot.

pub mod draft;
pub mod engine;
pub mod error;
pub mod future;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod target;
pub mod tensor;
pub mod train;

pub use error::{ConfuError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type ParamStoreF64 = nn::ParamStore<f64>;
