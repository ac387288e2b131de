//! Tabular stochastic optimal control on 1D grids: MDP solvers under the
//! discounted, gain and bias criteria, economic MPC with deterministic
//! surrogate models, and diagnostics that explain when the MPC policy
//! matches the MDP optimum.

pub mod analysis;
pub mod cost;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod mpc;
pub mod scenario;
pub mod sim;
pub mod solvers;
pub mod tables;

pub use error::{Error, Result};
