pub mod cache;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod model;
pub mod policy;
pub mod sequence;
pub mod simworld;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
