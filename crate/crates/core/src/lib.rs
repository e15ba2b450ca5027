//! Riemannian average-velocity flow maps at desk scale.
//!
//! The crate is layered bottom-up. [`autodiff`] supplies dual numbers and a
//! reverse tape behind one scalar trait. [`geometry`] implements closed-form
//! manifold primitives generic over that trait. [`model`] is the
//! two-time-conditioned MLP. [`training`] builds the regression targets and
//! fits them. [`inference`] samples, optionally with reward guidance.
//! [`evalsuite`] holds the datasets and oracles used to score everything.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod certify;
pub mod error;
pub mod evalsuite;
pub mod experiments;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod training;

pub use error::{Error, Result};
