#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod backward;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod recurrence;
pub mod tasks;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
