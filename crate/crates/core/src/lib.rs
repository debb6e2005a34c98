//! Immersion-based coding for privacy-preserving cloud computation.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod algorithm;
pub mod privacy;
pub mod scheme;
pub mod protocol;
pub mod casestudy;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
