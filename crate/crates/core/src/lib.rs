//! Path-pair kernels and order-parameter theory for deep multi-head
//! linear-value self-attention.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod paths;
pub mod predictor;
pub mod sampler;
pub mod solver;

pub use error::{Error, Result};
