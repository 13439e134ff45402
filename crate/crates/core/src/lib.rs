//! Forward-Forward training core.
//!
//! Everything in this crate is pure computation over owned values: dense
//! matrices, FF layers and their local objective, negative-label strategies,
//! both prediction modes, the performance-optimized per-layer heads, the
//! chapter schedule and the binary wire codec. It needs only `alloc`, so the
//! same numeric path runs inside any worker, transport or host.
//!
//! Determinism is a hard contract: every reduction has a fixed order and all
//! randomness is derived from `(seed, purpose, layer, chapter)` tags, so a
//! layer trained on one worker is bitwise identical to the same layer
//! trained on any other.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adam;
pub mod classify;
pub mod dataset;
pub mod engine;
mod error;
pub mod ff;
pub mod model;
pub mod neg;
pub mod perfopt;
pub mod plan;
mod real;
pub mod rng;
pub mod tensor;
pub mod wire;

pub use crate::adam::{AdamConfig, AdamState};
pub use crate::dataset::Dataset;
pub use crate::error::{Error, Result};
pub use crate::ff::FFLayer;
pub use crate::model::{Model, Stage};
pub use crate::neg::{NegAssignment, NegStrategy};
pub use crate::plan::{ClassifierMode, Mode, TrainingPlan};
pub use crate::real::Real;
pub use crate::tensor::Matrix;
