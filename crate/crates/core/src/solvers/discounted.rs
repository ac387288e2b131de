use rayon::prelude::*;

use super::{masked_backup, Mdp};
use crate::error::{Error, Result};
use crate::tables::{PolicyTable, QTable, ValueTable};

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct DiscountedSolution {
    pub values: ValueTable,
    pub q: QTable,
    pub policy: PolicyTable,
    /// Jacobi sweeps performed before the residual dropped below `tol`.
    pub iterations: usize,
    /// Sup-norm residual `||TV - V||` of the returned values.
    pub residual: f64,
    /// Sup-norm difference between successive Jacobi iterates.
    pub history: Vec<f64>,
    /// Policy-evaluation refinement rounds run after the sweeps.
    pub refinements: usize,
}

/// One Jacobi sweep on dense values. Only safe actions are evaluated, so
/// the entries of `v` outside the feasible set are never read.
fn sweep(mdp: &Mdp, cost: &[f64], v: &[f64], gamma: f64, q: &mut [f64], v_next: &mut [f64]) {
    let n_a = mdp.n_actions();
    q.par_chunks_mut(n_a).zip(v_next.par_iter_mut()).enumerate().for_each(|(s, (q_row, vn))| {
        if !mdp.is_feasible(s) {
            return;
        }
        let mut best = f64::INFINITY;
        for (a, q_sa) in q_row.iter_mut().enumerate() {
            if !mdp.is_safe(s, a) {
                continue;
            }
            let val = cost[s * n_a + a] + gamma * mdp.kernel.row(s, a).dot(v);
            *q_sa = val;
            best = best.min(val);
        }
        *vn = best;
    });
}

fn sup_diff(mdp: &Mdp, a: &[f64], b: &[f64]) -> f64 {
    (0..a.len()).filter(|&s| mdp.is_feasible(s)).map(|s| (a[s] - b[s]).abs()).fold(0.0, f64::max)
}

fn to_tables(mdp: &Mdp, q: &[f64]) -> (QTable, ValueTable, PolicyTable) {
    let n_a = mdp.n_actions();
    let masked: Vec<Option<f64>> = q
        .iter()
        .enumerate()
        .map(|(idx, &x)| mdp.is_safe(idx / n_a, idx % n_a).then_some(x))
        .collect();
    let q = QTable::new(mdp.n_states(), n_a, masked);
    let (v, p) = q.greedy();
    (q, v, p)
}

/// Discounted value iteration with masked infinite costs.
///
/// Jacobi sweeps from `V = 0` run until `||TV - V|| <= tol`. The greedy
/// policy is then evaluated exactly and improved until stable, which
/// removes the `tol / (1 - gamma)` bias that the sweeps alone would leave
/// in `V`. The returned `Q` is the backup of the final evaluated values and
/// `V = min_a Q` holds exactly.
pub fn value_iteration(mdp: &Mdp, gamma: f64, tol: f64, max_iters: usize) -> Result<DiscountedSolution> {
    if gamma >= 1.0 {
        return Err(Error::CriterionMismatch(
            "the undiscounted cumulative criterion is unbounded; use the gain/bias solvers".into(),
        ));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("discount factor must be positive, got {gamma}")));
    }
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let cost = mdp.dense_cost();
    let mut v = vec![0.0; n_s];
    let mut v_next = vec![0.0; n_s];
    let mut q = vec![0.0; n_s * n_a];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        if mdp.feasible_count() == 0 {
            break;
        }
        if iterations >= max_iters {
            return Err(Error::IterationLimit { iterations, residual: *history.last().unwrap_or(&f64::NAN) });
        }
        sweep(mdp, &cost, &v, gamma, &mut q, &mut v_next);
        iterations += 1;
        let residual = sup_diff(mdp, &v_next, &v);
        history.push(residual);
        if residual <= tol {
            break;
        }
        std::mem::swap(&mut v, &mut v_next);
    }

    // Refinement: exact evaluation of the greedy policy, then improvement.
    let (mut q_table, mut values, mut policy) = to_tables(mdp, &q);
    let mut refinements = 0;
    while mdp.feasible_count() > 0 && refinements < 50 {
        let Ok(v_pi) = evaluate_dense(mdp, &policy, &cost, gamma, 1e-3 * tol.min(1e-10), 1_000_000) else {
            break;
        };
        sweep(mdp, &cost, &v_pi, gamma, &mut q, &mut v_next);
        refinements += 1;
        let (q_new, v_new, p_new) = to_tables(mdp, &q);
        let stable = p_new == policy;
        q_table = q_new;
        values = v_new;
        policy = p_new;
        if stable {
            break;
        }
    }

    let residual = if mdp.feasible_count() == 0 {
        0.0
    } else {
        let dense = values.dense(0.0);
        sweep(mdp, &cost, &dense, gamma, &mut q, &mut v_next);
        sup_diff(mdp, &v_next, &dense)
    };
    Ok(DiscountedSolution { values, q: q_table, policy, iterations, residual, history, refinements })
}

/// Iterative evaluation on dense values; stops when the a-posteriori error
/// bound `gamma / (1 - gamma) * ||V_{k+1} - V_k||` is below `tol`.
fn evaluate_dense(
    mdp: &Mdp,
    policy: &PolicyTable,
    cost: &[f64],
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let mut v = vec![0.0; n_s];
    let mut next = vec![0.0; n_s];
    let factor = gamma / (1.0 - gamma);
    for iteration in 0..max_iters {
        next.par_iter_mut().enumerate().for_each(|(s, out)| {
            if let Some(a) = policy.get(s) {
                *out = cost[s * n_a + a] + gamma * mdp.kernel.row(s, a).dot(&v);
            }
        });
        let diff = (0..n_s).filter(|&s| policy.get(s).is_some()).map(|s| (next[s] - v[s]).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if factor * diff <= tol {
            return Ok(v);
        }
        if iteration + 1 == max_iters {
            return Err(Error::IterationLimit { iterations: max_iters, residual: diff });
        }
    }
    Err(Error::IterationLimit { iterations: max_iters, residual: f64::NAN })
}

/// Evaluates a stationary policy: `V = l_pi + gamma P_pi V` within `tol`.
///
/// States whose closed-loop chain reaches the violation state or a state
/// without an action with positive probability get a masked value.
pub fn policy_evaluation(
    mdp: &Mdp,
    policy: &PolicyTable,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ValueTable> {
    if gamma >= 1.0 {
        return Err(Error::CriterionMismatch("policy evaluation requires gamma < 1".into()));
    }
    let n_s = mdp.n_states();
    if policy.len() != n_s {
        return Err(Error::Config(format!("policy covers {} states, expected {n_s}", policy.len())));
    }
    for s in 0..n_s {
        if let Some(a) = policy.get(s) {
            if a >= mdp.n_actions() || !mdp.cost.is_feasible(s, a) {
                return Err(Error::PolicyInvalid { state: s, action: a });
            }
        }
    }
    // Largest set closed under the policy: drop states leaking to
    // violation or to states without a defined action.
    let mut closed: Vec<bool> = (0..n_s).map(|s| policy.get(s).is_some()).collect();
    loop {
        let mut changed = false;
        for s in 0..n_s {
            if !closed[s] {
                continue;
            }
            let row = mdp.kernel.row(s, policy.get(s).unwrap_or(0));
            if row.violation > 0.0 || row.cells().any(|(k, p)| p > 0.0 && !closed[k]) {
                closed[s] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let restricted = PolicyTable::new((0..n_s).map(|s| policy.get(s).filter(|_| closed[s])).collect());
    let cost = mdp.dense_cost();
    let v = evaluate_dense(mdp, &restricted, &cost, gamma, tol, max_iters)?;
    Ok(ValueTable::new((0..n_s).map(|s| closed[s].then_some(v[s])).collect()))
}

/// Stage-wise output of [`finite_horizon_dp`].
#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    /// `policies[k]` is the optimal policy at stage `k = 0..=N`.
    pub policies: Vec<PolicyTable>,
    /// `values[k]` for `k = 0..=N+1`; `values[N+1]` is the terminal table.
    pub values: Vec<ValueTable>,
    /// Stage-0 action values.
    pub q0: QTable,
}

/// Backward recursion `V_k = min_a [l + gamma E V_{k+1}]`, `V_{N+1} = terminal`.
pub fn finite_horizon_dp(
    mdp: &Mdp,
    gamma: f64,
    horizon: usize,
    terminal: &ValueTable,
) -> Result<FiniteHorizonSolution> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    if terminal.len() != n_s {
        return Err(Error::Config(format!("terminal table has {} states, expected {n_s}", terminal.len())));
    }
    if terminal.finite_count() == 0 {
        return Err(Error::Config("terminal cost is masked everywhere".into()));
    }
    let mut values = vec![terminal.clone()];
    let mut policies = Vec::with_capacity(horizon + 1);
    let mut q0 = None;
    for _stage in (0..=horizon).rev() {
        let next = values.last().expect("nonempty").values.clone();
        let q: Vec<Option<f64>> = (0..n_s * n_a)
            .into_par_iter()
            .map(|idx| masked_backup(mdp.kernel, mdp.cost, &next, gamma, idx / n_a, idx % n_a))
            .collect();
        let q = QTable::new(n_s, n_a, q);
        let (v, p) = q.greedy();
        values.push(v);
        policies.push(p);
        q0 = Some(q);
    }
    values.reverse();
    policies.reverse();
    Ok(FiniteHorizonSolution { policies, values, q0: q0.expect("at least one stage") })
}

/// `A(s,a) = Q(s,a) - V(s)` where `Q` is finite, masked otherwise.
pub fn advantage(q: &QTable, v: &ValueTable) -> QTable {
    let n_a = q.n_actions();
    let vals = q
        .entries()
        .iter()
        .enumerate()
        .map(|(idx, &x)| Some(x? - v.get(idx / n_a)?))
        .collect();
    QTable::new(q.n_states(), n_a, vals)
}
