pub mod aggregator;
pub mod analyzer;
pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evalharness;
pub mod inference;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod toylang;
pub mod training;

pub use error::{Error, Result};
