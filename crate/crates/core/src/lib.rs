pub mod analysis;
pub mod codebook;
pub mod completion;
pub mod dataset;
pub mod error;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
