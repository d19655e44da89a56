pub mod autodiff;
pub mod data;
pub mod elbo;
pub mod error;
pub mod exec;
pub mod inference;
pub mod kernel;
pub mod likelihoods;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};
