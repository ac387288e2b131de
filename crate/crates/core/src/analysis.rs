//! Diagnostics that explain when an MPC built on a deterministic model
//! reproduces the MDP optimum: the delta field, the constant-offset check
//! and its end-to-end verification, the local Taylor decomposition, the
//! ideal-model construction, dissipativity residuals and steady states.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::TransitionKernel;
use crate::mpc::{DeterministicModel, MpcSolver};
use crate::solvers::{closed_loop_cost, relative_value_iteration, stationary_distribution, Mdp};
use crate::tables::{argmin_lowest, fmt_ext, interpolate, DistributionTable, PolicyTable, QTable, ValueTable};

/// `E[V(s+) | s, a]` over grid cells. Violation mass is charged `big_m` and
/// reported through the flag; masked successors make the expectation
/// undefined.
pub fn expected_value(kernel: &TransitionKernel, v: &ValueTable, s: usize, a: usize, big_m: f64) -> Option<(f64, bool)> {
    let row = kernel.row(s, a);
    let mut acc = row.violation * big_m;
    for (k, p) in row.cells() {
        if p > 0.0 {
            acc += p * v.get(k)?;
        }
    }
    Some((acc, row.violation > 0.0))
}

/// `Delta(s,a) = E[V*(s+) | s,a] - V*(f(s,a))` over the grid.
#[derive(Debug, Clone)]
pub struct DeltaField {
    grid: Grid,
    delta: Vec<Option<f64>>,
    flagged: Vec<bool>,
}

/// Summary statistics over a region of a [`DeltaField`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl DeltaField {
    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.delta[s * self.grid.n_actions + a]
    }

    pub fn is_flagged(&self, s: usize, a: usize) -> bool {
        self.flagged[s * self.grid.n_actions + a]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Defined, unflagged values on the cells accepted by `region`.
    pub fn values_in(&self, region: impl Fn(usize, usize) -> bool) -> Vec<f64> {
        let n_a = self.grid.n_actions;
        (0..self.delta.len())
            .filter(|&i| !self.flagged[i] && region(i / n_a, i % n_a))
            .filter_map(|i| self.delta[i])
            .collect()
    }

    /// Every defined value, flagged cells included.
    pub fn defined_values(&self) -> Vec<f64> {
        self.delta.iter().flatten().copied().collect()
    }

    pub fn summary(&self, region: impl Fn(usize, usize) -> bool) -> Option<DeltaSummary> {
        let vals = self.values_in(region);
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(DeltaSummary {
            count: vals.len(),
            mean,
            std: var.sqrt(),
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,a_idx,value,defined,flagged")?;
        let n_a = self.grid.n_actions;
        for (i, d) in self.delta.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", i / n_a, i % n_a, fmt_ext(*d), d.is_some() as u8, self.flagged[i] as u8)?;
        }
        Ok(())
    }
}

/// Delta field of `model` against the true kernel. `V*` is interpolated
/// linearly at off-grid model outputs. Cells are undefined where the cost is
/// infeasible, the model has no output or `V*` is masked on either side;
/// cells with violation mass (charged `big_m`) or a flagged model output are
/// flagged.
pub fn delta_field(
    kernel: &TransitionKernel,
    cost: &CostTable,
    v_star: &ValueTable,
    model: &DeterministicModel,
    big_m: f64,
) -> DeltaField {
    let grid = *kernel.grid();
    let n_a = grid.n_actions;
    let (delta, flagged): (Vec<_>, Vec<_>) = (0..grid.n_states * n_a)
        .into_par_iter()
        .map(|i| {
            let (s, a) = (i / n_a, i % n_a);
            if !cost.is_feasible(s, a) {
                return (None, false);
            }
            let Some(f) = model.next_state(s, a) else { return (None, false) };
            let Some((e, viol)) = expected_value(kernel, v_star, s, a, big_m) else { return (None, false) };
            match interpolate(&grid, &v_star.values, f) {
                Some(vf) => (Some(e - vf), viol || model.is_flagged(s, a)),
                None => (None, false),
            }
        })
        .unzip();
    DeltaField { grid, delta, flagged }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Check {
    pub constant: bool,
    pub v0_hat: f64,
    pub max_deviation: f64,
    pub count: usize,
}

/// Constancy test of the delta field on `region` (defined, unflagged cells
/// only): `v0_hat` is the mean and the field counts as constant when every
/// value is within `tol` of it.
pub fn theorem1_check(delta: &DeltaField, region: impl Fn(usize, usize) -> bool, tol: f64) -> Result<Theorem1Check> {
    let vals = delta.values_in(region);
    if vals.is_empty() {
        return Err(Error::Config("theorem check region contains no defined cell".into()));
    }
    let v0_hat = vals.iter().sum::<f64>() / vals.len() as f64;
    let max_deviation = vals.iter().map(|v| (v - v0_hat).abs()).fold(0.0, f64::max);
    Ok(Theorem1Check { constant: max_deviation <= tol, v0_hat, max_deviation, count: vals.len() })
}

/// Offset `Q0` predicted for an MPC with terminal cost `V*` when the delta
/// field equals `v0` everywhere.
pub fn theorem1_offset(v0: f64, gamma: f64, horizon: usize) -> f64 {
    let n = (horizon + 1) as f64;
    if gamma == 1.0 {
        v0 * n
    } else {
        v0 * gamma * (1.0 - gamma.powf(n)) / (1.0 - gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Conclusion {
    /// Mean of `Q* - Q^MPC` over the compared cells.
    pub q0_fit: f64,
    /// Offset predicted from `v0_hat`.
    pub q0_theory: f64,
    /// `max |Q^MPC + q0_fit - Q*|` over the compared cells.
    pub discrepancy: f64,
    pub cells: usize,
    /// Cells finite in exactly one of the two tables.
    pub mask_mismatches: usize,
}

/// Compares `Q^MPC + Q0` with `Q*` on the cells accepted by `region` where
/// both are finite, fitting `Q0` as the mean offset. The solver's problem
/// should use `V*` as terminal cost.
pub fn verify_theorem1_conclusion(
    solver: &MpcSolver,
    v0_hat: f64,
    q_star: &QTable,
    region: impl Fn(usize, usize) -> bool,
) -> Theorem1Conclusion {
    let (_, _, q_mpc) = solver.policy_table();
    let n_a = q_star.n_actions();
    let mut diffs = Vec::new();
    let mut mask_mismatches = 0;
    for i in 0..q_star.entries().len() {
        let (s, a) = (i / n_a, i % n_a);
        if !region(s, a) {
            continue;
        }
        match (q_star.get(s, a), q_mpc.get(s, a)) {
            (Some(qs), Some(qm)) => diffs.push(qs - qm),
            (None, None) => {}
            _ => mask_mismatches += 1,
        }
    }
    let p = solver.problem();
    let q0_theory = theorem1_offset(v0_hat, p.gamma, p.horizon);
    if diffs.is_empty() {
        return Theorem1Conclusion { q0_fit: 0.0, q0_theory, discrepancy: 0.0, cells: 0, mask_mismatches };
    }
    let q0_fit = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let discrepancy = diffs.iter().map(|d| (d - q0_fit).abs()).fold(0.0, f64::max);
    Theorem1Conclusion { q0_fit, q0_theory, discrepancy, cells: diffs.len(), mask_mismatches }
}

/// Local second-order decomposition of one delta value.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub delta: f64,
    /// `0.5 * variance * V''(f)`.
    pub trace_term: f64,
    /// `delta - trace_term`.
    pub remainder: f64,
    pub variance: f64,
    pub hessian_estimate: f64,
    /// Absolute moments `mu_k = sum P |s' - f|^k` for `k = 2..=K`.
    pub moment_bounds: Vec<f64>,
    /// Largest `|fourth difference| / (24 h^4)` of `V*` over the stencil
    /// covering the successor cells; multiplies `mu_4` in the remainder
    /// bound.
    pub fourth_difference_coeff: f64,
    /// Largest `|second difference| / h^2` over the same stencil.
    pub max_curvature: f64,
    /// Set when a central stencil did not fit and a one-sided one was used.
    pub one_sided: bool,
}

impl Lemma1Report {
    /// `c mu_4 + 2 (h^2 / 8) max|V''|`: the fourth-order Taylor remainder
    /// plus twice the linear-interpolation error.
    pub fn remainder_bound(&self, cell_width: f64) -> f64 {
        let mu4 = self.moment_bounds.get(2).copied().unwrap_or(0.0);
        self.fourth_difference_coeff * mu4 + 2.0 * cell_width * cell_width / 8.0 * self.max_curvature
    }
}

/// Decomposes `Delta(s,a)` into `0.5 Var V''(f)` and a remainder. `V''` is
/// a central second difference of the interpolated `V*` at `f(s,a)` with
/// step one cell width (one-sided near the edge of the finite region).
pub fn lemma1_decompose(
    kernel: &TransitionKernel,
    v_star: &ValueTable,
    model: &DeterministicModel,
    s: usize,
    a: usize,
    max_moment: usize,
    big_m: f64,
) -> Result<Lemma1Report> {
    let grid = kernel.grid();
    let h = grid.state_width();
    let f = model
        .next_state(s, a)
        .ok_or_else(|| Error::Data(format!("model undefined at ({s}, {a})")))?;
    let (e, _) = expected_value(kernel, v_star, s, a, big_m)
        .ok_or_else(|| Error::Data(format!("E[V*] undefined at ({s}, {a})")))?;
    let v = |x: f64| interpolate(grid, &v_star.values, x);
    let vf = v(f).ok_or_else(|| Error::Data(format!("V* undefined at f({s}, {a}) = {f}")))?;
    let delta = e - vf;

    let (hessian_estimate, one_sided) = match (v(f - h), v(f + h)) {
        (Some(l), Some(r)) => ((l - 2.0 * vf + r) / (h * h), false),
        _ => match (v(f + h), v(f + 2.0 * h), v(f - h), v(f - 2.0 * h)) {
            (Some(r1), Some(r2), _, _) => ((vf - 2.0 * r1 + r2) / (h * h), true),
            (_, _, Some(l1), Some(l2)) => ((vf - 2.0 * l1 + l2) / (h * h), true),
            _ => return Err(Error::Data(format!("no second-difference stencil around f({s}, {a})"))),
        },
    };

    let row = kernel.row(s, a);
    let inside: f64 = row.probs.iter().sum();
    let variance = if inside > 0.0 {
        let mean = row.cells().map(|(k, p)| p * grid.state(k)).sum::<f64>() / inside;
        row.cells().map(|(k, p)| p * (grid.state(k) - mean).powi(2)).sum::<f64>() / inside
    } else {
        0.0
    };
    let trace_term = 0.5 * variance * hessian_estimate;
    let moment_bounds = (2..=max_moment.max(2))
        .map(|k| row.cells().map(|(c, p)| p * (grid.state(c) - f).abs().powi(k as i32)).sum())
        .collect();

    // finite-difference curvature bounds over the successor stencil
    let (lo, hi) = if row.probs.is_empty() { (s, s) } else { (row.first, row.last()) };
    let node = |k: isize| -> Option<f64> {
        if k < 0 {
            None
        } else {
            v_star.get(k as usize)
        }
    };
    let mut fourth = 0.0_f64;
    let mut second = hessian_estimate.abs();
    for k in lo as isize - 2..=hi as isize + 2 {
        if let (Some(a0), Some(a1), Some(a2)) = (node(k - 1), node(k), node(k + 1)) {
            second = second.max((a0 - 2.0 * a1 + a2).abs() / (h * h));
        }
        if let (Some(a0), Some(a1), Some(a2), Some(a3), Some(a4)) =
            (node(k - 2), node(k - 1), node(k), node(k + 1), node(k + 2))
        {
            fourth = fourth.max((a0 - 4.0 * a1 + 6.0 * a2 - 4.0 * a3 + a4).abs());
        }
    }
    Ok(Lemma1Report {
        delta,
        trace_term,
        remainder: delta - trace_term,
        variance,
        hessian_estimate,
        moment_bounds,
        fourth_difference_coeff: fourth / h.powi(4) / 24.0,
        max_curvature: second,
        one_sided,
    })
}

/// Result of the ideal-model construction for one offset `v0`.
#[derive(Debug, Clone)]
pub struct IdealModelReport {
    pub model: DeterministicModel,
    pub v0: f64,
    pub level_tol: f64,
    /// Cells with finite `E[V*]` but no candidate on the level set.
    pub undefined_cells: Vec<(usize, usize)>,
    /// `(s, a)` where `f(s, a)` jumps by more than the threshold from
    /// `f(s - 1, a)`.
    pub discontinuity_cells: Vec<(usize, usize)>,
    /// Cells skipped because `E[V*]` is masked (infeasible or unsafe).
    pub excluded: usize,
}

impl IdealModelReport {
    pub fn is_fully_defined(&self) -> bool {
        self.undefined_cells.is_empty()
    }

    pub fn is_continuous(&self) -> bool {
        self.discontinuity_cells.is_empty()
    }
}

/// Sub-grid refinement for the level-set scan.
const IDEAL_REFINEMENT: usize = 10;
/// Jump threshold, in state cells, for the discontinuity flag.
const DISCONTINUITY_CELLS: f64 = 3.0;

/// Performance-oriented model: for each `(s, a)` with finite `E[V*(s+)]`
/// picks `x` in the reachable interval with
/// `|V*(x) - (E[V*(s+)] - v0)| <= level_tol` and maximal transition density.
///
/// Candidates are a sub-grid ten times finer than the state grid plus the
/// exact level-set crossings of the piecewise-linear `V*`.
pub fn ideal_model(kernel: &TransitionKernel, v_star: &ValueTable, v0: f64, level_tol: f64) -> IdealModelReport {
    let grid = *kernel.grid();
    let n_a = grid.n_actions;
    let h = grid.state_width();
    let cells: Vec<Result<Option<f64>>> = (0..grid.n_states * n_a)
        .into_par_iter()
        .map(|i| {
            let (s, a) = (i / n_a, i % n_a);
            let row = kernel.row(s, a);
            if row.violation > 0.0 || row.probs.is_empty() {
                return Err(Error::Data(String::new()));
            }
            let Some((e, _)) = expected_value(kernel, v_star, s, a, 0.0) else {
                return Err(Error::Data(String::new()));
            };
            let target = e - v0;
            let lo = grid.state_edge(row.first);
            let hi = grid.state_edge(row.last() + 1);
            let v = |x: f64| interpolate(&grid, &v_star.values, x);
            let mut candidates: Vec<f64> = Vec::new();
            let steps = ((hi - lo) / h * IDEAL_REFINEMENT as f64).round() as usize;
            for j in 0..=steps {
                let x = lo + (hi - lo) * j as f64 / steps.max(1) as f64;
                if v(x).is_some_and(|vx| (vx - target).abs() <= level_tol) {
                    candidates.push(x);
                }
            }
            // exact crossings on each linear piece between centres
            for k in row.first.saturating_sub(1)..=(row.last() + 1).min(grid.n_states - 1) {
                if k + 1 >= grid.n_states {
                    break;
                }
                let (Some(v1), Some(v2)) = (v_star.get(k), v_star.get(k + 1)) else { continue };
                if (v1 - target) * (v2 - target) <= 0.0 && v1 != v2 {
                    let x = grid.state(k) + (target - v1) / (v2 - v1) * h;
                    if x >= lo && x <= hi {
                        candidates.push(x);
                    }
                }
            }
            let best = candidates
                .into_iter()
                .map(|x| (x, kernel.density(s, a, x)))
                .filter(|&(_, d)| d > 0.0)
                .reduce(|b, c| if c.1 > b.1 || (c.1 == b.1 && c.0 < b.0) { c } else { b });
            Ok(best.map(|(x, _)| x))
        })
        .collect();

    let mut next_state = vec![None; cells.len()];
    let mut undefined_cells = Vec::new();
    let mut excluded = 0;
    for (i, c) in cells.into_iter().enumerate() {
        match c {
            Ok(Some(x)) => next_state[i] = Some(x),
            Ok(None) => undefined_cells.push((i / n_a, i % n_a)),
            Err(_) => excluded += 1,
        }
    }
    let model = DeterministicModel::new(&grid, next_state, vec![false; grid.n_states * n_a]);
    let mut discontinuity_cells = Vec::new();
    for a in 0..n_a {
        for s in 1..grid.n_states {
            if let (Some(x0), Some(x1)) = (model.next_state(s - 1, a), model.next_state(s, a)) {
                if (x1 - x0).abs() > DISCONTINUITY_CELLS * h {
                    discontinuity_cells.push((s, a));
                }
            }
        }
    }
    IdealModelReport { model, v0, level_tol, undefined_cells, discontinuity_cells, excluded }
}

/// `count` quantiles (linear interpolation between order statistics) of
/// `values`, from the minimum to the maximum.
pub fn v0_sweep(values: &[f64], count: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return Vec::new();
    }
    if count <= 1 {
        return vec![v[(v.len() - 1) / 2]];
    }
    (0..count)
        .map(|i| {
            let pos = (v.len() - 1) as f64 * i as f64 / (count - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// `L(s,a) + lambda(s) - lambda(f(s,a)) - kappa |s - s_bar|^2`, masked where
/// the cost is infeasible or the model has no output. `lambda` is
/// interpolated linearly at off-grid model outputs.
pub fn dissipativity_residual(
    model: &DeterministicModel,
    cost: &CostTable,
    lambda: &[f64],
    kappa_coeff: f64,
    s_bar: f64,
) -> QTable {
    let grid = model.grid();
    let lam: Vec<Option<f64>> = lambda.iter().map(|&x| Some(x)).collect();
    let vals = (0..grid.n_states * grid.n_actions)
        .map(|i| {
            let (s, a) = (i / grid.n_actions, i % grid.n_actions);
            let l = cost.get(s, a)?;
            let f = model.next_state(s, a)?;
            let lf = interpolate(grid, &lam, f)?;
            let x = grid.state(s);
            Some(l + lambda[s] - lf - kappa_coeff * (x - s_bar).powi(2))
        })
        .collect();
    QTable::new(grid.n_states, grid.n_actions, vals)
}

/// Cheapest grid cell that is a steady state of the model within half a
/// cell width; lowest `(s, a)` index on ties. `None` when no feasible cell
/// is near-stationary.
pub fn optimal_steady_pair(model: &DeterministicModel, cost: &CostTable) -> Option<(usize, usize)> {
    let grid = model.grid();
    let half = 0.5 * grid.state_width();
    let vals: Vec<Option<f64>> = (0..grid.n_states * grid.n_actions)
        .map(|i| {
            let (s, a) = (i / grid.n_actions, i % grid.n_actions);
            let f = model.next_state(s, a)?;
            if (f - grid.state(s)).abs() <= half + 1e-12 {
                cost.get(s, a)
            } else {
                None
            }
        })
        .collect();
    argmin_lowest(vals).map(|(i, _)| (i / grid.n_actions, i % grid.n_actions))
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub rho_star: DistributionTable,
    pub average_cost: f64,
    pub gain: f64,
    pub policy: PolicyTable,
    pub averaged: bool,
}

/// Stationary distribution of the gain-optimal closed loop and its
/// occupation-weighted cost.
pub fn steady_state_distribution_of_optimum(mdp: &Mdp, tol: f64, max_iters: usize) -> Result<SteadyState> {
    let gain = relative_value_iteration(mdp, tol, max_iters, None)?;
    let st = stationary_distribution(mdp.kernel, &gain.gain_policy, tol, max_iters)?;
    let average_cost = closed_loop_cost(mdp.cost, &gain.gain_policy, &st.distribution)?;
    Ok(SteadyState {
        rho_star: st.distribution,
        average_cost,
        gain: gain.gain,
        policy: gain.gain_policy,
        averaged: st.averaged,
    })
}
