pub mod corpus;
pub mod decode;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
