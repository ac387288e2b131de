use rayon::prelude::*;

use super::model::DeterministicModel;
use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tables::{argmin_lowest, interpolate_with, PolicyTable, QTable, ValueTable};

/// Slack when comparing node centres against tightened bounds.
const BOUND_SLACK: f64 = 1e-12;

/// Finite-horizon deterministic MPC problem over a grid model:
///
/// `min sum_{i=0..N} gamma^i l(x_i, u_i) + gamma^{N+1} T(x_{N+1})`
/// subject to `x_{i+1} = f(x_i, u_i)` and
/// `x_i in [lo + c_i, hi - c_i]` with `c_i = min(i * tightening, tightening_max)`.
///
/// The terminal table's finite mask is the terminal set.
#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub model: &'a DeterministicModel,
    pub cost: &'a CostTable,
    pub horizon: usize,
    pub gamma: f64,
    pub terminal: ValueTable,
    pub tightening: f64,
    pub tightening_max: f64,
}

impl<'a> MpcProblem<'a> {
    /// Problem without constraint tightening.
    pub fn new(model: &'a DeterministicModel, cost: &'a CostTable, horizon: usize, gamma: f64, terminal: ValueTable) -> Self {
        Self { model, cost, horizon, gamma, terminal, tightening: 0.0, tightening_max: f64::INFINITY }
    }

    pub fn with_tightening(mut self, per_step: f64, max: f64) -> Self {
        self.tightening = per_step;
        self.tightening_max = max;
        self
    }

    pub fn grid(&self) -> &Grid {
        self.model.grid()
    }

    /// Tightened state bounds at prediction step `i`.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let g = self.grid();
        let c = (i as f64 * self.tightening).min(self.tightening_max);
        (g.state_lo + c, g.state_hi - c)
    }

    fn within(&self, i: usize, x: f64) -> bool {
        let (lo, hi) = self.bounds(i);
        x >= lo - BOUND_SLACK && x <= hi + BOUND_SLACK
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("mpc gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.cost.n_states() != g.n_states || self.cost.n_actions() != g.n_actions {
            return Err(Error::Config("cost table does not match the model grid".into()));
        }
        if self.terminal.len() != g.n_states {
            return Err(Error::Config(format!("terminal table has {} states, expected {}", self.terminal.len(), g.n_states)));
        }
        if !(self.tightening >= 0.0) || !(self.tightening_max >= 0.0) {
            return Err(Error::Config("tightening must be nonnegative".into()));
        }
        let (lo, hi) = self.bounds(self.horizon);
        if lo >= hi {
            return Err(Error::Config(format!(
                "tightened bounds are empty at step {}: [{lo}, {hi}]",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Result of one MPC solve from `s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Planned actions `u_0..u_N` (action-grid centres).
    pub actions: Vec<f64>,
    pub action_indices: Vec<usize>,
    /// `x_0..x_{N+1}`, with `x_0 = s0`.
    pub predicted_states: Vec<f64>,
    /// Optimal value of the dynamic program at `s0`; `None` when infeasible.
    pub objective: Option<f64>,
    /// Cost of the reconstructed plan, evaluated along the interpolated path.
    pub plan_cost: Option<f64>,
    pub feasible: bool,
}

/// Backward dynamic program of an [`MpcProblem`] over the grid nodes.
///
/// Off-grid model outputs are handled by linear interpolation of the
/// stage values; every table shares the MDP solvers' indexing and
/// lowest-index tie-breaking.
#[derive(Debug, Clone)]
pub struct MpcSolver<'a> {
    problem: MpcProblem<'a>,
    /// `stages[i]` is the optimal cost-to-go at step `i`, `i = 0..=N+1`.
    stages: Vec<Vec<Option<f64>>>,
}

impl<'a> MpcSolver<'a> {
    pub fn new(problem: MpcProblem<'a>) -> Result<Self> {
        problem.validate()?;
        let g = *problem.grid();
        let n = problem.horizon;
        // Node tables hold values with the node's own state constraint
        // relaxed; the constraint is enforced on the continuous query point,
        // so interpolation next to a bound is not masked by an outside node.
        let mut stages = vec![problem.terminal.values.clone()];
        for i in (0..=n).rev() {
            let next = stages.last().expect("nonempty");
            let current: Vec<Option<f64>> = (0..g.n_states)
                .into_par_iter()
                .map(|s| {
                    (0..g.n_actions)
                        .filter_map(|a| node_q(&problem, next, i, s, a))
                        .reduce(f64::min)
                })
                .collect();
            stages.push(current);
        }
        stages.reverse();
        Ok(Self { problem, stages })
    }

    pub fn problem(&self) -> &MpcProblem<'a> {
        &self.problem
    }

    /// Optimal cost-to-go table at step `i`.
    pub fn stage_values(&self, i: usize) -> ValueTable {
        let g = self.problem.grid();
        ValueTable::new((0..g.n_states).map(|s| self.stages[i][s].filter(|_| self.problem.within(i, g.state(s)))).collect())
    }

    fn stage_at(&self, i: usize, x: f64) -> Option<f64> {
        if !self.problem.within(i, x) {
            return None;
        }
        interpolate_with(self.problem.grid(), x, |k| self.stages[i][k])
    }

    /// Action value at step `i` from an arbitrary state with action index
    /// `a`: stage cost and model are interpolated between nodes.
    fn q_at(&self, i: usize, x: f64, a: usize) -> Option<f64> {
        let p = &self.problem;
        if !p.within(i, x) {
            return None;
        }
        let g = p.grid();
        let l = interpolate_with(g, x, |k| p.cost.get(k, a))?;
        let xn = p.model.at(x, a)?;
        Some(l + p.gamma * self.stage_at(i + 1, xn)?)
    }

    /// `Q^MPC(s0, a)` with the first action pinned to index `a`.
    pub fn q(&self, s0: f64, a: usize) -> Option<f64> {
        self.q_at(0, s0, a)
    }

    /// `Q^MPC(s0, a0)` for a real action: masked outside the action bounds,
    /// otherwise evaluated at the nearest action-grid centre.
    pub fn q_value(&self, s0: f64, a0: f64) -> Option<f64> {
        let g = self.problem.grid();
        if !(a0 >= g.action_lo && a0 <= g.action_hi) {
            return None;
        }
        self.q(s0, g.nearest_action(a0))
    }

    pub fn solve(&self, s0: f64) -> MpcSolution {
        let p = &self.problem;
        let g = p.grid();
        let n = p.horizon;
        let first = argmin_lowest((0..g.n_actions).map(|a| self.q(s0, a)).collect::<Vec<_>>());
        let Some((_, objective)) = first else {
            return MpcSolution {
                actions: Vec::new(),
                action_indices: Vec::new(),
                predicted_states: vec![s0],
                objective: None,
                plan_cost: None,
                feasible: false,
            };
        };
        let mut x = s0;
        let mut states = vec![s0];
        let mut indices = Vec::with_capacity(n + 1);
        let mut plan_cost = Some(0.0);
        let mut discount = 1.0;
        for i in 0..=n {
            let q: Vec<Option<f64>> = (0..g.n_actions).map(|a| self.q_at(i, x, a)).collect();
            let Some((a, _)) = argmin_lowest(q) else {
                plan_cost = None;
                break;
            };
            let l = interpolate_with(g, x, |k| p.cost.get(k, a)).expect("finite action value implies finite cost");
            plan_cost = plan_cost.map(|c| c + discount * l);
            x = p.model.at(x, a).expect("finite action value implies a model output");
            indices.push(a);
            states.push(x);
            discount *= p.gamma;
        }
        if plan_cost.is_some() {
            let t = interpolate_with(g, x, |k| p.terminal.get(k)).filter(|_| p.within(n + 1, x));
            plan_cost = match (plan_cost, t) {
                (Some(c), Some(t)) => Some(c + discount * t),
                _ => None,
            };
        }
        MpcSolution {
            actions: indices.iter().map(|&a| g.action(a)).collect(),
            action_indices: indices,
            predicted_states: states,
            objective: Some(objective),
            plan_cost,
            feasible: true,
        }
    }

    /// `Q^MPC` at every node, with `V^MPC = min_a Q^MPC` and
    /// `pi^MPC = argmin_a Q^MPC` (lowest index on ties).
    pub fn policy_table(&self) -> (PolicyTable, ValueTable, QTable) {
        let g = self.problem.grid();
        let next = &self.stages[1];
        let q: Vec<Option<f64>> = (0..g.n_states * g.n_actions)
            .into_par_iter()
            .map(|idx| {
                let s = idx / g.n_actions;
                node_q(&self.problem, next, 0, s, idx % g.n_actions).filter(|_| self.problem.within(0, g.state(s)))
            })
            .collect();
        let q = QTable::new(g.n_states, g.n_actions, q);
        let (v, p) = q.greedy();
        (p, v, q)
    }
}

/// Step-`i` action value at node `s` given the step-`i+1` table, without
/// the step-`i` constraint on the node itself.
fn node_q(p: &MpcProblem, next: &[Option<f64>], i: usize, s: usize, a: usize) -> Option<f64> {
    let g = p.grid();
    let l = p.cost.get(s, a)?;
    let xn = p.model.usable(s, a)?;
    if !p.within(i + 1, xn) {
        return None;
    }
    Some(l + p.gamma * interpolate_with(g, xn, |k| next[k])?)
}

pub fn solve_mpc(problem: &MpcProblem, s0: f64) -> Result<MpcSolution> {
    if !problem.grid().contains_state(s0) {
        return Err(Error::Config(format!("initial state {s0} is outside the state bounds")));
    }
    Ok(MpcSolver::new(problem.clone())?.solve(s0))
}

pub fn mpc_q(problem: &MpcProblem, s0: f64, a0: f64) -> Result<Option<f64>> {
    if !problem.grid().contains_state(s0) {
        return Err(Error::Config(format!("initial state {s0} is outside the state bounds")));
    }
    Ok(MpcSolver::new(problem.clone())?.q_value(s0, a0))
}

pub fn mpc_policy_table(problem: &MpcProblem) -> Result<(PolicyTable, ValueTable, QTable)> {
    Ok(MpcSolver::new(problem.clone())?.policy_table())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_stage_cost, energy_cost, BoxConstraints};
    use crate::grid::{AffineDrift, NoiseSpec};
    use crate::kernel::build_kernel;
    use crate::mpc::model::expected_value_model;

    fn energy() -> (Grid, DeterministicModel, CostTable) {
        let g = Grid::new(0.0, 1.0, 51, -0.25, 0.25, 21).unwrap();
        let k = build_kernel(&g, AffineDrift::additive(), NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        let c = build_stage_cost(&g, energy_cost(2.0, 1.0), &BoxConstraints::from_grid(&g)).unwrap();
        (g, expected_value_model(&k), c)
    }

    #[test]
    fn horizon_zero_is_one_step_greedy() {
        let (g, m, c) = energy();
        let p = MpcProblem::new(&m, &c, 0, 0.99, ValueTable::zeros(g.n_states)).with_tightening(0.05, f64::INFINITY);
        let solver = MpcSolver::new(p.clone()).unwrap();
        for s in [10, 25, 40] {
            let sol = solver.solve(g.state(s));
            let brute = (0..g.n_actions)
                .filter(|&a| m.usable(s, a).is_some_and(|x| x >= 0.05 - 1e-12 && x <= 0.95 + 1e-12))
                .min_by(|&a, &b| c.get(s, a).unwrap().total_cmp(&c.get(s, b).unwrap()))
                .unwrap();
            assert_eq!(sol.action_indices[0], brute);
            assert_eq!(sol.predicted_states.len(), 2);
        }
    }

    #[test]
    fn q_consistency_and_masks() {
        let (g, m, c) = energy();
        let p = MpcProblem::new(&m, &c, 5, 0.99, ValueTable::zeros(g.n_states)).with_tightening(0.05, 0.05);
        let solver = MpcSolver::new(p).unwrap();
        let (pi, v, q) = solver.policy_table();
        for s in 0..g.n_states {
            if let Some(a) = pi.get(s) {
                assert_eq!(q.get(s, a), v.get(s));
                assert_eq!(solver.q(g.state(s), a), v.get(s));
                let sol = solver.solve(g.state(s));
                assert_eq!(sol.objective, v.get(s));
                assert_eq!(sol.action_indices[0], a);
                assert_eq!(sol.actions.len(), 6);
                assert_eq!(sol.predicted_states.len(), 7);
            }
        }
        assert_eq!(solver.q_value(0.5, 0.3), None);
        assert!(solver.q_value(0.5, 0.0).is_some());
    }

    #[test]
    fn empty_tightened_bounds_rejected() {
        let (g, m, c) = energy();
        let p = MpcProblem::new(&m, &c, 30, 0.99, ValueTable::zeros(g.n_states)).with_tightening(0.05, f64::INFINITY);
        assert!(matches!(MpcSolver::new(p), Err(Error::Config(_))));
    }

    #[test]
    fn value_grows_with_horizon_for_nonnegative_cost() {
        let (g, m, _) = energy();
        let c = build_stage_cost(&g, |s, a| (s - 0.5).abs() + a.abs(), &BoxConstraints::from_grid(&g)).unwrap();
        let mut prev: Option<ValueTable> = None;
        for n in 0..6 {
            let p = MpcProblem::new(&m, &c, n, 0.95, ValueTable::zeros(g.n_states)).with_tightening(0.05, 0.05);
            let (_, v, _) = mpc_policy_table(&p).unwrap();
            if let Some(prev) = &prev {
                for s in 0..g.n_states {
                    if let (Some(a), Some(b)) = (prev.get(s), v.get(s)) {
                        assert!(b >= a - 1e-12);
                    }
                }
            }
            prev = Some(v);
        }
    }
}
