//! Piecewise-analytic transient stability of power grids with ZIP loads.
//!
//! The pipeline augments a network with internal generator nodes, replaces
//! ZIP loads by an impedance-plus-constant-power model, linearizes every
//! algebraic quantity in the internal-node voltages with a holomorphic
//! embedding and Padé summation, and solves the resulting linear swing ODE in
//! closed form inside validity regions that are chained by consistent
//! re-initialization. Modified-Euler and truncated-series integrators serve as
//! references.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assess;
pub mod case_model;
pub mod error;
pub mod he_linearizer;
pub mod linalg;
pub mod qpf;
pub mod reference_sims;
pub mod region_tracker;
pub mod swing_core;
pub mod trajectory;
pub mod zip_loads;

pub use error::{Error, Result};
