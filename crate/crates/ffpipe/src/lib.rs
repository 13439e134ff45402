//! Pipelined Forward-Forward training across nodes.
//!
//! The numeric work lives in `ffpipe-core`; this crate moves layers between
//! workers (in-process channels or TCP), keeps each node's time accounts,
//! loads datasets from disk and writes metrics.

pub mod bench;
pub mod cli;
pub mod clock;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod run;
pub mod transport;
pub mod worker;

pub use crate::error::{PipeError, Result};
