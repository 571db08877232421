pub mod dataset;
pub mod difflayer;
pub mod embedder;
pub mod error;
pub mod harness;
pub mod select;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
