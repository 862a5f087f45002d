//! Solver library for single-leader multi-follower Stackelberg games.
//!
//! The lower level is a strongly monotone game solved by distributed
//! projected pseudo-gradient fixed-point sweeps; the upper level runs
//! projected hypergradient descent, where the sensitivity of the lower-level
//! equilibrium is learned online by propagating projection Jacobians through
//! the same fixed-point iteration. Three inner-loop policies are provided
//! (general / linear-quadratic with polyhedral constraints / equality-only
//! linear-quadratic) with matching termination tests and error bounds.
//!
//! Modules:
//! - [`model`]: game instances, validation, pseudo-gradient and leader cost.
//! - [`polyproj`]: parametric polyhedral projection and KKT differentiation.
//! - [`equilibrium`]: projected pseudo-gradient sweeps and the warmstart loop.
//! - [`sensitivity`]: online Jacobian learning and its error bounds.
//! - [`outer`]: the hypergradient outer loop, schedules, and run traces.
//! - [`oracles`]: independent ground-truth generators used by tests/checks.
//! - [`dr`]: the hierarchical demand-response instance builder.
//! - [`gen`]: seeded random instance generators.

pub mod dr;
pub mod equilibrium;
pub mod error;
pub mod gen;
mod linalg;
pub mod model;
pub mod oracles;
pub mod outer;
pub mod polyproj;
pub mod sensitivity;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use model::{Constants, GameSpec, Variant};
