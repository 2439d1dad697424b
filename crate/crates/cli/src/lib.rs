//! Configuration, orchestration and output files for the `nsf` command.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;
pub mod snapshot;
