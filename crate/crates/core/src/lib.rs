//! Simulation and control toolkit for an inverter-based AC microgrid:
//! droop-controlled voltage dynamics as the plant, per-inverter lifted
//! linear predictors identified from simulated data, and a distributed
//! consensus-augmented MPC for secondary voltage regulation, with a
//! nonlinear MPC baseline for speed comparison.

pub mod control;
pub mod error;
pub mod exec;
pub mod graph;
pub mod grid;
pub mod koopman;
pub mod numerics;
pub mod scenario;

pub use error::{Error, Result};
