//! Weighted Laplacian eigenvalue computations on flat charts: mesh
//! generation, finite element assembly, generalized eigensolvers, and the
//! first-order variation of eigenvalue clusters under metric, weight, and
//! boundary perturbations.

// `!(a > b)` is how NaN gets rejected in argument checks
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::needless_range_loop)]

pub mod fieldexpr;
pub mod geometry;
pub mod mesh;
pub mod sparse;
pub mod assembly;
pub mod eigen;
pub mod hadamard;
pub mod verify;
