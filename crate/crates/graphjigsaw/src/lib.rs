//! Training, evaluation, and visualization around `graphjigsaw-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod seeds;
pub mod synthetic;
pub mod train;
pub mod visualize;

pub use error::{AppError, AppResult};
