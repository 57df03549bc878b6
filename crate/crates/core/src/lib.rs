//! Multi-image morphable-model fitting, identity/residual shape
//! disentangling and face reconstruction/recognition metrics on synthetic
//! face models.

// Negated comparisons such as `!(x > 0.0)` deliberately treat NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod network;
pub mod synthetic;

pub use error::{Error, Result};
