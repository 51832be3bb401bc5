pub mod acquisition;
pub mod csvio;
pub mod error;
pub mod flow;
pub mod inference;
pub mod metrics;
pub mod prior;
pub mod seed;
pub mod simulators;
pub mod training;

pub use error::{Error, Result};
