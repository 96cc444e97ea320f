pub mod cli;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod patching;
pub mod pointcloud;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
