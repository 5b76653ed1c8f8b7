//! Hierarchical coordination of interacting subsystems.
//!
//! A coordinator reconciles the coupling profiles exchanged between
//! subsystems by fixed-point iteration, evaluates the central cost for an
//! auxiliary set-point and improves the set-point with a derivative-free
//! trust-region method. A closed-loop harness drives a cold-box surrogate
//! plant under receding-horizon control.

pub mod closedloop;
pub mod config;
pub mod control;
pub mod coordinator;
pub mod error;
pub mod graph;
pub mod model;
pub mod profile;
pub mod system;

pub use error::{Error, Result};
