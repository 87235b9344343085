pub mod aqm;
pub mod autodiff;
pub mod cli;
pub mod codes;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod streamio;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
