pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod longform;
pub mod loss;
pub mod model;
pub mod nn;
pub mod recipe;
pub mod trainer;

pub use error::{Error, Result};
