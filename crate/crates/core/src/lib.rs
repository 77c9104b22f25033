//! Recurrent and impulse-response language models: corpus handling, exact gradients,
//! regularized training, evaluation and analysis.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod regopt;
pub mod train;

pub use error::{Error, Result};
