//! Toy flow-matching diffusion transformer with gate calibration by CMA-ES
//! under analytic rewards.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cmaes;
pub mod dit;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod rewards;

pub use error::{Error, Result};
