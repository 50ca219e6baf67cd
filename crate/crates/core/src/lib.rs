pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod hash;
pub mod infer;
pub mod par;
pub mod rng;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
