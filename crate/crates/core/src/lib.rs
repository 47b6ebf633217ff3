pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod loss;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
