pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod pruning;
pub mod train;

pub use error::{Error, Result};
