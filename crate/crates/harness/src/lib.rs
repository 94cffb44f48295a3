//! Configuration, toy data, training, sampling, evaluation and the `dtr`
//! command line.

pub mod cli;
pub mod compare;
pub mod config;
pub mod data;
mod error;
pub mod run;
pub mod seeds;
pub mod swd;
pub mod train;

pub use error::{HarnessError, Result};
