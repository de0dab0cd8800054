pub mod diff;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod predictor;
pub mod tasks;

pub use error::{Error, Result};
