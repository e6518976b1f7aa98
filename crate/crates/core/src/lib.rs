//! Trust stack for tile-embedding classifiers.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod conformal;
pub mod data;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod sngp;
pub mod trust;

pub use error::{Error, Result};
