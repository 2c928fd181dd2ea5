pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod real;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
