pub mod diagnostics;
pub mod diffcalc;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
