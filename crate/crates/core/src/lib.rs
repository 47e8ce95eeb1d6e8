pub mod config;
pub mod cli;
pub mod cpa;
pub mod data;
pub mod deep;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod mmd;
pub mod model;
pub mod objective;
pub mod ops;
pub mod params;
pub mod sparse;
pub mod synthetic;
pub mod train;

pub use error::{CiderError, Result};
