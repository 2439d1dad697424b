//! Regular solutions of the compressible Navier-Stokes-Fourier system on the
//! periodic torus, censored at a blow-up stopping time, together with the
//! phase-space metric and Monte Carlo estimators for statistical solutions.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fields;
pub mod solver;
pub mod extended;
pub mod metric;
pub mod statistics;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
