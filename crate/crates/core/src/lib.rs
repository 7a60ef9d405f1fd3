//! Discrete Dirichlet forms, intrinsic distances and small-time heat asymptotics.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod asymptotics;
pub mod coefficients;
pub mod distance;
pub mod error;
pub mod evolution;
pub mod form;
pub mod mesh;
pub mod region;
pub mod scenario;

pub use error::{LabError, Result};
