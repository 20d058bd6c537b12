//! Perturbed diagonally implicit Runge–Kutta integrators.
//!
//! The implicit stage equations of a DIRK method are solved with a cheap,
//! inexact surrogate (a Taylor linearization, a digit-chopped inverse, or a
//! low-precision LU inside an iterative solver), optionally followed by
//! explicit or stabilized correction sweeps that use the accurate right-hand
//! side. The [`analysis`] module evaluates the one-step error bounds for such
//! schemes and checks them against twin integrations.

// Negated comparisons are used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Conserved blocks are ranges; a single block is still a list of them.
#![allow(clippy::single_range_in_vec_init)]

pub mod analysis;
pub mod corrections;
pub mod error;
pub mod integrate;
pub mod linalg;
pub mod precision;
pub mod problems;
pub mod spectral;
pub mod stage;
pub mod tableau;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
