//! A small CPU tensor library and a single-head vision transformer built on it.

pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod profile;
pub mod redundancy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
