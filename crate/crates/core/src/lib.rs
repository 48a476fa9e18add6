//! Multi-source domain adaptation for gas-sensor drift compensation.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod lmmd;
pub mod losses;
pub mod network;
pub mod params;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
