//! Configuration parsing and experiment pipelines behind the `etalab` binary.

// `!(a > b)` is how NaN gets rejected in argument checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;
pub mod svg;
