pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, no_grad, Float, Tensor};
