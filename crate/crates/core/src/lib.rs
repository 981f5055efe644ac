//! Element-wise activation scaling (EWAS) for adversarially robust CNNs.
//!
//! The crate bundles a small deterministic autodiff engine ([`tensor`]),
//! the EWAS mechanism ([`ewas`]), backbone models with named insertion
//! points ([`model`]), white-box l∞ attacks ([`attacks`]), AT/TRADES/MART
//! training ([`training`]), activation statistics ([`analysis`]) and
//! dataset loaders ([`data`]). [`gradcheck`] holds the finite-difference
//! helpers used by the test suites.

// `!(x > 0.0)` comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod error;
pub mod ewas;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, DataError, Error, Result};
