//! Small encoder–decoder transformer over a named parameter store.

mod config;
mod store;
mod transformer;

pub use config::ModelConfig;
pub use store::{Param, ParameterStore};
pub use transformer::{build_model, Gradients, Transformer};
