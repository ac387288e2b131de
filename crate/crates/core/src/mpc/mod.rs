//! Economic MPC over deterministic surrogate models, solved by grid dynamic
//! programming, plus the open-loop stochastic planning oracle.

mod model;
mod open_loop;
mod scheme;

pub use model::{expected_value_model, max_likelihood_model, DeterministicModel};
pub use open_loop::{open_loop_plan, sequence_cost, OpenLoopPlan, EXHAUSTIVE_LIMIT};
pub use scheme::{mpc_policy_table, mpc_q, solve_mpc, MpcProblem, MpcSolution, MpcSolver};
