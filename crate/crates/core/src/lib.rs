//! Discretised transfer operators of one-dimensional gradient SDEs, their
//! invariant densities, linear response to kernel perturbations, and the
//! unit-norm perturbation that maximises the rate of change of an
//! observable's expectation.

// `!(x < y)` is used on purpose so that NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod config;
pub mod error;
pub mod export;
pub mod fpe;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod optimal;
pub mod response;
pub mod transfer;

pub use error::{Error, Result};
