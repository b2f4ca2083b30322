pub mod actmap;
pub mod akg;
pub mod autodiff;
pub mod cbi;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod netcore;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
