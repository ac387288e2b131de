//! Exact tabular solvers for the discounted, gain and bias criteria, the
//! finite-horizon recursion and stationary distributions.

mod average;
mod discounted;
mod stationary;

pub use average::{bias_optimal_solve, relative_value_iteration, GainBiasSolution};
pub use discounted::{
    advantage, finite_horizon_dp, policy_evaluation, value_iteration, DiscountedSolution,
    FiniteHorizonSolution,
};
pub use stationary::{closed_loop_cost, stationary_distribution, StationaryResult};

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::kernel::TransitionKernel;

/// A kernel paired with its stage cost, plus the recursive feasible set.
///
/// A state is recursively feasible when some action has finite cost, puts no
/// mass on the violation state and keeps every successor recursively
/// feasible. Those actions are the *safe* actions; every finite value
/// produced by the solvers lives on this set.
#[derive(Debug)]
pub struct Mdp<'a> {
    pub kernel: &'a TransitionKernel,
    pub cost: &'a CostTable,
    feasible: Vec<bool>,
    safe: Vec<bool>,
}

impl<'a> Mdp<'a> {
    pub fn new(kernel: &'a TransitionKernel, cost: &'a CostTable) -> Result<Self> {
        if kernel.n_states() != cost.n_states() || kernel.n_actions() != cost.n_actions() {
            return Err(Error::Config(format!(
                "kernel is {}x{} but cost table is {}x{}",
                kernel.n_states(),
                kernel.n_actions(),
                cost.n_states(),
                cost.n_actions()
            )));
        }
        let (n_s, n_a) = (kernel.n_states(), kernel.n_actions());
        let mut feasible = vec![true; n_s];
        let mut safe = vec![false; n_s * n_a];
        loop {
            let mut changed = false;
            for s in 0..n_s {
                if !feasible[s] {
                    continue;
                }
                let mut any = false;
                for a in 0..n_a {
                    let ok = cost.is_feasible(s, a) && {
                        let row = kernel.row(s, a);
                        row.violation == 0.0
                            && !row.probs.is_empty()
                            && row.cells().all(|(k, p)| p == 0.0 || feasible[k])
                    };
                    safe[s * n_a + a] = ok;
                    any |= ok;
                }
                if !any {
                    feasible[s] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // final pass so that `safe` reflects the fixed point
        for s in 0..n_s {
            for a in 0..n_a {
                if !feasible[s] {
                    safe[s * n_a + a] = false;
                }
            }
        }
        Ok(Self { kernel, cost, feasible, safe })
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions()
    }

    pub fn is_feasible(&self, s: usize) -> bool {
        self.feasible[s]
    }

    pub fn is_safe(&self, s: usize, a: usize) -> bool {
        self.safe[s * self.n_actions() + a]
    }

    /// Lowest-index recursively feasible state.
    pub fn first_feasible(&self) -> Option<usize> {
        self.feasible.iter().position(|&f| f)
    }

    pub fn feasible_count(&self) -> usize {
        self.feasible.iter().filter(|&&f| f).count()
    }

    /// Dense stage cost, zero where infeasible (never read there).
    pub(crate) fn dense_cost(&self) -> Vec<f64> {
        self.cost.entries().iter().map(|c| c.unwrap_or(0.0)).collect()
    }
}

/// Masked backup `l(s,a) + gamma * sum_s' P(s'|s,a) V(s')`; masked when the
/// stage cost is infeasible or any reachable successor (including the
/// violation state) is masked.
pub(crate) fn masked_backup(
    kernel: &TransitionKernel,
    cost: &CostTable,
    values: &[Option<f64>],
    gamma: f64,
    s: usize,
    a: usize,
) -> Option<f64> {
    let l = cost.get(s, a)?;
    let row = kernel.row(s, a);
    if row.violation > 0.0 || row.probs.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    for (k, p) in row.cells() {
        if p > 0.0 {
            acc += p * values[k]?;
        }
    }
    Some(l + gamma * acc)
}
