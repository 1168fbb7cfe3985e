//! Pseudospectral laboratory for renormalized Φ⁴ equations on the torus.

// `!(x > 0.0)` style guards are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod coefficients;
pub mod commands;
pub mod concentration;
pub mod config;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod paracalc;
pub mod noise;
pub mod quadrature;
pub mod rng;
pub mod solvers;
pub mod symbols;
pub mod output;
pub mod torus;
pub mod verify;

pub use error::{LabError, Result};
