//! Monotone Picard iteration for multi-dimensional coupled forward-backward
//! SDEs whose generators are quadratic in their own row of `Z` only.
//!
//! The pipeline: a problem is described by [`model::FbsdeProblem`], its
//! structural assumptions are probed by [`probes`], paths are simulated by
//! [`simulation`], the backward equation is solved by regression in
//! [`backward`], and [`picard`] alternates the two until the iterates settle.

pub mod expr;
pub mod model;
pub mod probes;
pub mod simulation;
pub mod regression;
pub mod backward;
pub mod picard;
pub mod diagnostics;
pub mod comparison;
pub mod registry;

mod par;
