use rayon::prelude::*;

use super::Mdp;
use crate::error::{Error, Result};
use crate::tables::{argmin_lowest, PolicyTable, QTable, ValueTable, TIE_TOLERANCE};

/// Damping used once periodicity is detected: `h <- tau h + (1 - tau) T h`.
const APERIODIC_TAU: f64 = 0.5;
/// Window (in sweeps) over which the span must shrink before the chain is
/// declared periodic.
const PERIOD_WINDOW: usize = 64;
/// Actions within this relative distance of the per-state minimum of the
/// gain equation count as gain-optimal.
const GAIN_SET_TOLERANCE: f64 = 1e-9;

/// Gain and bias data for the average-cost criteria.
#[derive(Debug, Clone)]
pub struct GainBiasSolution {
    /// Optimal long-run average cost per step.
    pub gain: f64,
    /// Relative value `h` after [`relative_value_iteration`] (zero at the
    /// reference state); the bias after [`bias_optimal_solve`].
    pub bias: ValueTable,
    /// `l(s,a) + sum_s' P(s'|s,a) h(s')` for the relative values `h`.
    pub q: QTable,
    pub gain_policy: PolicyTable,
    pub bias_policy: Option<PolicyTable>,
    pub ref_state: usize,
    pub iterations: usize,
    /// Final span seminorm of `Th - h`.
    pub span: f64,
    /// Set when the span stopped contracting and the damped iteration was
    /// used instead.
    pub periodic: bool,
    /// States where several gain-optimal actions remain tied after the bias
    /// stage; the lowest index is reported in `bias_policy`.
    pub bias_ties: Vec<usize>,
}

struct RviOutcome {
    gain: f64,
    h: Vec<f64>,
    iterations: usize,
    span: f64,
    periodic: bool,
}

/// Undiscounted relative value iteration on dense tables. `allowed` masks
/// the admissible (s,a) pairs; every state in `states` must have one.
fn rvi_core(
    mdp: &Mdp,
    cost: &[f64],
    allowed: &[bool],
    tol: f64,
    max_iters: usize,
    ref_state: usize,
) -> Result<RviOutcome> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let active: Vec<bool> = (0..n_s).map(|s| (0..n_a).any(|a| allowed[s * n_a + a])).collect();
    let mut h = vec![0.0; n_s];
    let mut th = vec![0.0; n_s];
    let mut periodic = false;
    let mut spans: Vec<f64> = Vec::new();
    for iteration in 1..=max_iters {
        th.par_iter_mut().enumerate().for_each(|(s, out)| {
            if !active[s] {
                return;
            }
            let mut best = f64::INFINITY;
            for a in 0..n_a {
                if allowed[s * n_a + a] {
                    best = best.min(cost[s * n_a + a] + mdp.kernel.row(s, a).dot(&h));
                }
            }
            *out = best;
        });
        let (lo, hi) = (0..n_s)
            .filter(|&s| active[s])
            .map(|s| th[s] - h[s])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let span = hi - lo;
        if span <= tol {
            let gain = 0.5 * (lo + hi);
            let shift = th[ref_state];
            let h = (0..n_s).map(|s| if active[s] { th[s] - shift } else { 0.0 }).collect();
            return Ok(RviOutcome { gain, h, iterations: iteration, span, periodic });
        }
        spans.push(span);
        if !periodic && spans.len() > PERIOD_WINDOW {
            let before = spans[spans.len() - 1 - PERIOD_WINDOW];
            if span >= (1.0 - 1e-12) * before {
                periodic = true;
            }
        }
        let tau = if periodic { APERIODIC_TAU } else { 0.0 };
        let shift = tau * h[ref_state] + (1.0 - tau) * th[ref_state];
        for s in 0..n_s {
            if active[s] {
                h[s] = tau * h[s] + (1.0 - tau) * th[s] - shift;
            }
        }
    }
    Err(Error::IterationLimit { iterations: max_iters, residual: *spans.last().unwrap_or(&f64::NAN) })
}

fn safe_mask(mdp: &Mdp) -> Vec<bool> {
    let n_a = mdp.n_actions();
    (0..mdp.n_states() * n_a).map(|idx| mdp.is_safe(idx / n_a, idx % n_a)).collect()
}

fn q_table(mdp: &Mdp, cost: &[f64], allowed: &[bool], h: &[f64]) -> QTable {
    let n_a = mdp.n_actions();
    let vals = (0..mdp.n_states() * n_a)
        .into_par_iter()
        .map(|idx| allowed[idx].then(|| cost[idx] + mdp.kernel.row(idx / n_a, idx % n_a).dot(h)))
        .collect();
    QTable::new(mdp.n_states(), n_a, vals)
}

/// Gain-optimal policy by relative value iteration.
///
/// Solves `h(s) + g = min_a [l(s,a) + sum_s' P(s'|s,a) h(s')]` over the
/// recursively feasible states, stopping when the span of `Th - h` is at
/// most `tol`, with `h(ref_state) = 0`. The restricted chain is assumed
/// unichain. If the span stops contracting (periodic chain) the damped
/// operator `tau h + (1 - tau) T h` is used, which has the same solutions,
/// and `periodic` is set on the result.
pub fn relative_value_iteration(
    mdp: &Mdp,
    tol: f64,
    max_iters: usize,
    ref_state: Option<usize>,
) -> Result<GainBiasSolution> {
    let Some(first) = mdp.first_feasible() else {
        return Err(Error::Data("no recursively feasible state".into()));
    };
    let ref_state = ref_state.unwrap_or(first);
    if ref_state >= mdp.n_states() || !mdp.is_feasible(ref_state) {
        return Err(Error::Config(format!("reference state {ref_state} is not recursively feasible")));
    }
    let cost = mdp.dense_cost();
    let allowed = safe_mask(mdp);
    let out = rvi_core(mdp, &cost, &allowed, tol, max_iters, ref_state)?;
    let q = q_table(mdp, &cost, &allowed, &out.h);
    let (_, gain_policy) = q.greedy();
    let bias = ValueTable::new((0..mdp.n_states()).map(|s| mdp.is_feasible(s).then_some(out.h[s])).collect());
    Ok(GainBiasSolution {
        gain: out.gain,
        bias,
        q,
        gain_policy,
        bias_policy: None,
        ref_state,
        iterations: out.iterations,
        span: out.span,
        periodic: out.periodic,
        bias_ties: Vec::new(),
    })
}

/// Bias-optimal policy among the gain-optimal ones.
///
/// Actions within `1e-9 (1 + |g|)` of the minimum of the gain equation form
/// the restricted sets `A1(s)`. The second optimality equation
/// `w(s) + h(s) = min_{a in A1(s)} sum_s' P(s'|s,a) w(s')` is then solved as
/// an average-cost problem with stage cost `-h(s)`; its gain `g2` turns the
/// relative values into the bias `h + g2` (zero stationary mean), and the
/// argmin over `A1` of `P w` is the bias-optimal policy.
pub fn bias_optimal_solve(
    mdp: &Mdp,
    gain_solution: &GainBiasSolution,
    tol: f64,
    max_iters: usize,
) -> Result<GainBiasSolution> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let g = gain_solution.gain;
    let band = GAIN_SET_TOLERANCE * (1.0 + g.abs());
    let mut restricted = vec![false; n_s * n_a];
    for s in (0..n_s).filter(|&s| mdp.is_feasible(s)) {
        let row = gain_solution.q.row(s);
        let Some(min) = row.iter().flatten().copied().reduce(f64::min) else {
            return Err(Error::Tolerance(format!("no gain-optimal action at state {s}")));
        };
        for (a, q) in row.iter().enumerate() {
            restricted[s * n_a + a] = q.is_some_and(|q| q <= min + band);
        }
    }
    let h = gain_solution.bias.dense(0.0);
    let second_cost: Vec<f64> = (0..n_s * n_a).map(|idx| -h[idx / n_a]).collect();
    let out = rvi_core(mdp, &second_cost, &restricted, tol, max_iters, gain_solution.ref_state)?;

    let zero = vec![0.0; n_s * n_a];
    let pw = q_table(mdp, &zero, &restricted, &out.h);
    let mut bias_ties = Vec::new();
    let actions = (0..n_s)
        .map(|s| {
            let (a, min) = argmin_lowest(pw.row(s).iter().copied())?;
            let thresh = min + (TIE_TOLERANCE * min.abs().max(1.0)).max(tol);
            if pw.row(s).iter().filter(|v| v.is_some_and(|v| v <= thresh)).count() > 1 {
                bias_ties.push(s);
            }
            Some(a)
        })
        .collect();
    let bias = ValueTable::new((0..n_s).map(|s| mdp.is_feasible(s).then_some(h[s] + out.gain)).collect());
    Ok(GainBiasSolution {
        bias,
        bias_policy: Some(PolicyTable::new(actions)),
        iterations: gain_solution.iterations + out.iterations,
        periodic: gain_solution.periodic || out.periodic,
        bias_ties,
        ..gain_solution.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostTable;
    use crate::grid::Grid;
    use crate::kernel::TransitionKernel;

    fn mdp_parts(
        succ: impl Fn(usize, usize) -> Option<usize>,
        n_s: usize,
        n_a: usize,
        cost: Vec<Option<f64>>,
    ) -> (TransitionKernel, CostTable) {
        let g = Grid::new(0.0, n_s as f64, n_s, 0.0, 1.0, n_a).unwrap();
        (TransitionKernel::from_successors(&g, succ), CostTable::from_entries(n_s, n_a, cost).unwrap())
    }

    #[test]
    fn constant_cost_gain() {
        let (k, c) = mdp_parts(|s, a| Some((s + a) % 3), 3, 2, vec![Some(0.7); 6]);
        let m = Mdp::new(&k, &c).unwrap();
        let sol = relative_value_iteration(&m, 1e-12, 1000, None).unwrap();
        assert!((sol.gain - 0.7).abs() < 1e-12);
        assert!(sol.bias.values.iter().all(|h| h.unwrap().abs() < 1e-12));
    }

    #[test]
    fn period_two_cycle() {
        let (k, c) = mdp_parts(|s, _| Some(1 - s), 2, 2, vec![Some(0.0), Some(0.0), Some(2.0), Some(2.0)]);
        let m = Mdp::new(&k, &c).unwrap();
        let sol = relative_value_iteration(&m, 1e-10, 10_000, None).unwrap();
        assert!(sol.periodic);
        assert!((sol.gain - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bias_prefers_staying_over_equal_gain_cycle() {
        // s0: a0 -> s1 at cost 2, a1 stays at cost 0; s1 -> s0 at cost -2.
        // Both policies have gain 0 and tie in the gain equation; staying
        // has the smaller bias.
        let (k, c) = mdp_parts(
            |s, a| Some(if s == 0 && a == 1 { 0 } else { 1 - s }),
            2,
            2,
            vec![Some(2.0), Some(0.0), Some(-2.0), Some(-2.0)],
        );
        let m = Mdp::new(&k, &c).unwrap();
        let gain = relative_value_iteration(&m, 1e-12, 1000, None).unwrap();
        assert!(gain.gain.abs() < 1e-12);
        assert_eq!(gain.gain_policy.get(0), Some(0));
        let bias = bias_optimal_solve(&m, &gain, 1e-12, 1000).unwrap();
        assert_eq!(bias.bias_policy.as_ref().unwrap().get(0), Some(1));
        assert!((bias.bias.get(0).unwrap()).abs() < 1e-10);
        assert!((bias.bias.get(1).unwrap() + 2.0).abs() < 1e-10);
        assert_eq!(bias.bias_ties, vec![1]);
    }
}
