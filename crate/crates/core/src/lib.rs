//! Rare-event probability estimation for scenario models described by
//! truncated Gaussian mixtures.
//!
//! The pipeline:
//!
//! 1. [`tgmm`] fits a truncated Gaussian mixture to scenario data by EM.
//! 2. [`monoset`] learns inner and outer approximations of a monotone
//!    rare-event set from labelled simulator outcomes (Pareto frontiers).
//! 3. [`dompoints`] turns the approximations into dominating points, one set
//!    per mixture component.
//! 4. [`accel`] builds the mean-shifted mixture importance-sampling
//!    distribution, iterates the construction and estimates the probability.
//!
//! [`scenario`] provides the indicator functions (an ACC/AEB lane-change
//! surrogate and analytic sets with known probabilities), and [`cli`] wires
//! everything into the `accel-eval` binary.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod accel;
pub mod cli;
pub mod dompoints;
pub mod error;
pub mod gaussmath;
pub mod monoset;
pub mod rng;
pub mod scenario;
pub mod serde_ext;
pub mod tgmm;

pub use error::{Error, Result};
