//! Solvers for semi-infinite programs by adaptive discretization.
//!
//! Two outer loops are provided: the classical Blankenship–Falk exchange
//! method, and a variant that augments every discretized master problem with
//! a linearized lower-level Lagrangian constraint per constraint family, which
//! converges quadratically under standard regularity assumptions.

// `!(a > b)` is deliberate where NaN must take the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod driver;
pub mod lower_level;
pub mod model;
pub mod nlp;
pub mod problems;
pub mod sensitivity;
pub mod spec_loader;
