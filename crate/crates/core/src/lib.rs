pub mod bayes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod icp;
pub mod lwta;
pub mod samplers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
