//! Diversity-inducing information-bottleneck ensembles.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod nets;
pub mod objectives;
pub mod oodeval;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{DibsError, Result};
