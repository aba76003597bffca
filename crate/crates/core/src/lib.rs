//! Table-based memory-access prediction: trace preparation, an attention
//! predictor and its distillation, product-quantization tabularization,
//! a cost model and an evaluation harness.

mod binio;
pub mod cost;
pub mod distill;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod nn;
pub mod pq;
pub mod tabularize;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use tensor::Tensor;
