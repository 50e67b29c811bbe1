//! Coupled bulk–surface parabolic equations with dynamic boundary conditions
//! on the unit disk: discretization, forward solves, Carleman weight
//! diagnostics, and inverse problems for potentials and initial data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod carleman;
pub mod config;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod inverse_initial;
pub mod inverse_potentials;
pub mod linalg;
pub mod model;
pub mod sampling;

pub use error::{Error, Result};
