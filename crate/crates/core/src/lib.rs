pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
