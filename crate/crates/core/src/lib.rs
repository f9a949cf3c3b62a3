//! Continuous-time ridership forecasting on station graphs.
//!
//! Station states evolve under a learned graph ODE between observations and
//! are corrected by a GRU cell whenever an observation arrives.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diff;
pub mod eval;
pub mod graph;
pub mod model;
pub mod ode;
pub mod synth;
pub mod tensor;
pub mod training;

pub use diff::{grad_check, Graph, Var};
pub use tensor::Tensor;
