pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gsw;
pub mod losses;
pub mod nn;
pub mod si;
pub mod synthetic;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SaicError};
pub use tensor::Tensor;
