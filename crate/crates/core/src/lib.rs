pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2;
