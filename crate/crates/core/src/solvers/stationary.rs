use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::kernel::TransitionKernel;
use crate::tables::{DistributionTable, PolicyTable};

const STALL_WINDOW: usize = 64;

#[derive(Debug, Clone)]
pub struct StationaryResult {
    pub distribution: DistributionTable,
    pub iterations: usize,
    /// `||rho P_pi - rho||_1` of the returned distribution.
    pub residual: f64,
    /// Set when plain power iteration stalled (periodic chain) and the
    /// averaged iterate `rho <- (rho + rho P) / 2` was used instead.
    pub averaged: bool,
}

fn step(kernel: &TransitionKernel, policy: &PolicyTable, rho: &[f64], out: &mut [f64]) -> Result<()> {
    let n_s = kernel.n_states();
    out.iter_mut().for_each(|x| *x = 0.0);
    for s in 0..n_s {
        let m = rho[s];
        if m == 0.0 {
            continue;
        }
        let Some(a) = policy.get(s) else {
            return Err(Error::Data(format!("closed-loop mass reaches state {s} where the policy is undefined")));
        };
        let row = kernel.row(s, a);
        for (k, p) in row.cells() {
            out[k] += m * p;
        }
        out[n_s] += m * row.violation;
    }
    out[n_s] += rho[n_s];
    Ok(())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Stationary distribution of the closed-loop chain by power iteration from
/// the uniform distribution over states where `policy` is defined.
///
/// Stops when `||rho P - rho||_1 <= tol`. When the residual stops shrinking
/// (periodic chain) the iteration switches to the lazy chain `(I + P) / 2`,
/// which shares the stationary distribution and is aperiodic.
pub fn stationary_distribution(
    kernel: &TransitionKernel,
    policy: &PolicyTable,
    tol: f64,
    max_iters: usize,
) -> Result<StationaryResult> {
    let n_s = kernel.n_states();
    let covered = policy.defined_count();
    if covered == 0 {
        return Err(Error::Data("policy is undefined everywhere".into()));
    }
    let mut rho = vec![0.0; n_s + 1];
    for s in 0..n_s {
        if policy.get(s).is_some() {
            rho[s] = 1.0 / covered as f64;
        }
    }
    let mut next = vec![0.0; n_s + 1];
    let mut averaged = false;
    let mut history = Vec::new();
    for iteration in 0..max_iters {
        step(kernel, policy, &rho, &mut next)?;
        let residual = l1(&next, &rho);
        if residual <= tol {
            return Ok(StationaryResult { distribution: DistributionTable::new(rho), iterations: iteration, residual, averaged });
        }
        history.push(residual);
        if !averaged && history.len() > STALL_WINDOW && residual >= (1.0 - 1e-12) * history[history.len() - 1 - STALL_WINDOW] {
            averaged = true;
        }
        if averaged {
            for (r, n) in rho.iter_mut().zip(&next) {
                *r = 0.5 * (*r + n);
            }
        } else {
            std::mem::swap(&mut rho, &mut next);
        }
    }
    Err(Error::IterationLimit { iterations: max_iters, residual: *history.last().unwrap_or(&f64::NAN) })
}

/// Occupation-weighted stage cost `sum_s rho(s) l(s, pi(s))`.
pub fn closed_loop_cost(cost: &CostTable, policy: &PolicyTable, rho: &DistributionTable) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..cost.n_states() {
        if rho.mass[s] == 0.0 {
            continue;
        }
        let a = policy.get(s).ok_or(Error::Simulation { state: s })?;
        let c = cost.get(s, a).ok_or(Error::PolicyInvalid { state: s, action: a })?;
        total += rho.mass[s] * c;
    }
    if rho.violation_mass() > 0.0 {
        return Err(Error::Data("stationary mass on the violation state has infinite cost".into()));
    }
    Ok(total)
}
