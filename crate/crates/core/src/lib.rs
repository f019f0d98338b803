//! Sorting permutations with adjacent swaps using a one-block attention
//! policy trained by PPO, plus probes that read the ordering the policy
//! encodes in its last attention row.

pub mod diffcore;
pub mod env;
pub mod error;
pub mod model;
pub mod ppo;
pub mod probe;

pub use error::{Error, Result};
