//! Replay-across-experiments off-policy reinforcement learning.

pub mod algos;
pub mod critic;
pub mod envs;
pub mod error;
pub mod net;
pub mod replay;
pub mod rng;
pub mod store;
pub mod trajectory;
pub mod workflow;

pub use error::{Error, Result};
