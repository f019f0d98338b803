//! Training, probing, sweep and report tooling around `permsort-core`.

pub mod cli;
pub mod error;
pub mod eval;
pub mod report;
pub mod rundir;
pub mod sweep;

pub use error::{Result, RunnerError};
