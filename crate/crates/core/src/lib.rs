pub mod abduction;
pub mod archive;
pub mod editor;
mod conv;
pub mod error;
pub mod eval;
mod fused;
pub mod generator;
pub mod imaging;
pub mod lora;
pub mod schedule;
pub mod session;
pub mod tensor_util;
#[cfg(test)]
mod testing;

pub use candle_core::{DType, Device};
pub use error::{DacError, Result};
