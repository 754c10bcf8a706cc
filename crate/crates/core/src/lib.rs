//! Finite-volume laboratory for parabolic equations
//! `u_t - div(a grad u) + b . grad u = 0` with divergence-free drift `b`.
//!
//! The crate computes discrete fundamental solutions on periodic boxes and
//! checks them against closed-form heat-kernel envelopes, energy estimates,
//! Nash functionals and oscillation decay.

// `!(x <= y)` is used on purpose so that NaN fails the comparison.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod container;
pub mod error;
pub mod fields;
pub mod grid;
pub mod harness;
pub mod nash_tools;
pub mod norms_scaling;
pub mod quad;
pub mod regularity;
pub mod solver;
pub mod tolerances;

pub use error::{Error, Result};
