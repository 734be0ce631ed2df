//! Radiative-transfer toolkit: a deterministic discrete-ordinates sweep
//! solver for the 2D-reduced steady transport equation, and an attention-based
//! neural Green's-function operator trained against it, with a from-scratch
//! reverse-mode differentiation engine.
//!
//! Start with the `examples/` directory for runnable tours of each
//! capability, or the thin `rte` binary for config-driven runs.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod model;
pub mod solver;
pub mod training;

pub use error::RteError;
