//! Std companion to `hfw-core`: character datasets, preprocessing,
//! checkpoints, experiment configuration, the training loop and the
//! commands behind the `hfw` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use error::{AppError, Result};
