//! Surprise-adequacy toolkit for classifier test sets.
//!
//! Fits likelihood-based surprise (LSA) density models on activation traces,
//! compares LSA distributions between reference sets, prioritizes inputs by
//! surprise, and evaluates prioritized subsets with weight-fuzzing mutants.

pub mod diststat;
pub mod error;
pub mod experiment;
pub mod mutation;
pub mod nnrt;
pub mod preprocess;
pub mod prioritize;
pub mod seed;
pub mod stats;
pub mod surprise;
pub mod trace;

pub use error::{Error, FormatErrorKind, Result};
