//! High-dimensional mean monitoring with a diagonal-distance control chart.
//!
//! Domain guards are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cornish_fisher;
pub mod chart;
pub mod error;
pub mod experiment;
pub mod io;
pub mod parallel;
pub mod robust;
pub mod selfstart;
pub mod simulation;
pub mod stats;
pub mod sum;

pub use error::{Error, Result};
