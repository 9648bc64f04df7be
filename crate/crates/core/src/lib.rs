pub mod algebra;
pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
