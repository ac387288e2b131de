use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::kernel::TransitionKernel;
use crate::tables::ValueTable;

/// Horizons up to this length are planned exactly.
pub const EXHAUSTIVE_LIMIT: usize = 4;

/// Open-loop plan: one fixed action sequence for all noise realisations.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPlan {
    pub actions: Vec<usize>,
    /// Exact expected cost of `actions`.
    pub objective: f64,
    /// True when the plan is a global minimiser (branch and bound); false
    /// when it came from coordinate descent.
    pub exact: bool,
    /// Search nodes expanded.
    pub nodes: usize,
}

/// Forward propagation of the state distribution under fixed actions with
/// finite surrogate costs: masked stage or terminal costs and the first
/// entry into the violation state are charged `big_m`.
struct Evaluator<'a> {
    kernel: &'a TransitionKernel,
    cost: &'a CostTable,
    gamma: f64,
    terminal: Vec<f64>,
    big_m: f64,
}

#[derive(Clone)]
struct Dist {
    mass: Vec<f64>,
    lo: usize,
    hi: usize,
}

impl<'a> Evaluator<'a> {
    fn stage_cost(&self, d: &Dist, a: usize) -> f64 {
        (d.lo..=d.hi).filter(|&s| d.mass[s] > 0.0).map(|s| d.mass[s] * self.cost.get(s, a).unwrap_or(self.big_m)).sum()
    }

    /// Next distribution and the mass newly lost to violation.
    fn step(&self, d: &Dist, a: usize) -> (Dist, f64) {
        let n = self.kernel.n_states();
        let mut mass = vec![0.0; n];
        let (mut lo, mut hi) = (n, 0);
        let mut lost = 0.0;
        for s in d.lo..=d.hi {
            let m = d.mass[s];
            if m == 0.0 {
                continue;
            }
            let row = self.kernel.row(s, a);
            for (k, p) in row.cells() {
                mass[k] += m * p;
            }
            if !row.probs.is_empty() {
                lo = lo.min(row.first);
                hi = hi.max(row.last());
            }
            lost += m * row.violation;
        }
        if lo > hi {
            (lo, hi) = (0, 0);
        }
        (Dist { mass, lo, hi }, lost)
    }

    fn terminal_cost(&self, d: &Dist) -> f64 {
        (d.lo..=d.hi).map(|s| d.mass[s] * self.terminal[s]).sum()
    }

    fn point(&self, s0: usize) -> Dist {
        let mut mass = vec![0.0; self.kernel.n_states()];
        mass[s0] = 1.0;
        Dist { mass, lo: s0, hi: s0 }
    }

    fn sequence_cost(&self, s0: usize, actions: &[usize]) -> f64 {
        let mut d = self.point(s0);
        let mut total = 0.0;
        let mut disc = 1.0;
        for &a in actions {
            total += disc * self.stage_cost(&d, a);
            let (next, lost) = self.step(&d, a);
            disc *= self.gamma;
            total += disc * lost * self.big_m;
            d = next;
        }
        total + disc * self.terminal_cost(&d)
    }

    /// Closed-loop values with the same surrogate costs, a lower bound on
    /// every open-loop completion. Level `i` holds the action values
    /// `q[s * n_a + a]` of stage `i` and their row minima `w`; the last
    /// level has only `w`, the terminal values.
    fn closed_loop_bounds(&self, horizon: usize) -> Vec<Bounds> {
        let n_s = self.kernel.n_states();
        let n_a = self.kernel.n_actions();
        let mut levels = vec![Bounds { q: Vec::new(), w: self.terminal.clone() }];
        for _ in 0..=horizon {
            let next = &levels.last().expect("nonempty").w;
            let q: Vec<f64> = (0..n_s * n_a)
                .map(|i| {
                    let (s, a) = (i / n_a, i % n_a);
                    let row = self.kernel.row(s, a);
                    let cont: f64 = row.cells().map(|(k, p)| p * next[k]).sum();
                    self.cost.get(s, a).unwrap_or(self.big_m) + self.gamma * (cont + row.violation * self.big_m)
                })
                .collect();
            let w = q.chunks(n_a).map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect();
            levels.push(Bounds { q, w });
        }
        levels.reverse();
        levels
    }
}

struct Bounds {
    q: Vec<f64>,
    w: Vec<f64>,
}

struct Search<'e, 'a> {
    eval: &'e Evaluator<'a>,
    bounds: Vec<Bounds>,
    horizon: usize,
    best: f64,
    best_actions: Vec<usize>,
    prefix: Vec<usize>,
    nodes: usize,
}

impl Search<'_, '_> {
    fn dfs(&mut self, i: usize, d: &Dist, acc: f64, disc: f64) {
        self.nodes += 1;
        let n_a = self.eval.kernel.n_actions();
        let q = &self.bounds[i].q;
        // bound of each child without propagating its distribution
        let mut children: Vec<(f64, usize)> = (0..n_a)
            .map(|a| {
                let b: f64 = (d.lo..=d.hi).filter(|&s| d.mass[s] > 0.0).map(|s| d.mass[s] * q[s * n_a + a]).sum();
                (acc + disc * b, a)
            })
            .collect();
        // stable sort keeps the lowest index first among equal bounds
        children.sort_by(|x, y| x.0.total_cmp(&y.0));
        for (bound, a) in children {
            if bound >= self.best {
                break;
            }
            self.prefix.push(a);
            if i == self.horizon {
                // the bound at the last stage is the exact total
                self.best = bound;
                self.best_actions = self.prefix.clone();
            } else {
                let (next, lost) = self.eval.step(d, a);
                let c = acc + disc * (self.eval.stage_cost(d, a) + self.eval.gamma * lost * self.eval.big_m);
                self.dfs(i + 1, &next, c, disc * self.eval.gamma);
            }
            self.prefix.pop();
        }
    }
}

/// Coordinate descent from the closed-loop greedy actions along the most
/// likely path. Returns a local minimum, its cost and the evaluations used.
fn descend(eval: &Evaluator, bounds: &[Bounds], s0: usize, horizon: usize) -> (Vec<usize>, f64, usize) {
    // start: closed-loop greedy actions along the most likely path
    let n_a = eval.kernel.n_actions();
    let mut actions = Vec::with_capacity(horizon + 1);
    let mut d = eval.point(s0);
    for i in 0..=horizon {
        let s = (d.lo..=d.hi).max_by(|&x, &y| d.mass[x].total_cmp(&d.mass[y])).unwrap_or(s0);
        let a = (0..n_a)
            .map(|a| {
                let row = eval.kernel.row(s, a);
                let cont: f64 = row.cells().map(|(k, p)| p * bounds[i + 1].w[k]).sum();
                eval.cost.get(s, a).unwrap_or(eval.big_m) + eval.gamma * (cont + row.violation * eval.big_m)
            })
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(a, _)| a)
            .unwrap_or(0);
        actions.push(a);
        d = eval.step(&d, a).0;
    }
    let mut best = eval.sequence_cost(s0, &actions);
    let mut nodes = 0;
    loop {
        let mut improved = false;
        for i in 0..=horizon {
            for a in 0..n_a {
                let old = actions[i];
                actions[i] = a;
                nodes += 1;
                let c = eval.sequence_cost(s0, &actions);
                if c < best {
                    best = c;
                    improved = true;
                } else {
                    actions[i] = old;
                }
            }
        }
        if !improved {
            break;
        }
    }
    (actions, best, nodes)
}

/// Best fixed action sequence `a_0..a_N` from cell `s0`, minimising the
/// exact expected cost computed by propagating the state distribution
/// through the kernel. Violation is charged `big_m` once on entry, masked
/// stage and terminal costs are charged `big_m`.
///
/// Horizons up to [`EXHAUSTIVE_LIMIT`] are solved exactly by branch and
/// bound over the full action-grid product, with closed-loop values as the
/// bound. Longer horizons use coordinate descent from the sequence the
/// closed-loop stage policies take along the most likely path; that result
/// is a local minimum only.
pub fn open_loop_plan(
    kernel: &TransitionKernel,
    cost: &CostTable,
    gamma: f64,
    horizon: usize,
    terminal: &ValueTable,
    s0: usize,
    big_m: f64,
) -> Result<OpenLoopPlan> {
    if s0 >= kernel.n_states() {
        return Err(Error::Config(format!("initial state index {s0} is out of range")));
    }
    if terminal.len() != kernel.n_states() {
        return Err(Error::Config("terminal table does not match the kernel".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) || !(big_m.is_finite()) {
        return Err(Error::Config("open-loop planning needs gamma in (0, 1] and a finite big-M".into()));
    }
    let eval = Evaluator { kernel, cost, gamma, terminal: terminal.dense(big_m), big_m };
    let bounds = eval.closed_loop_bounds(horizon);
    if horizon <= EXHAUSTIVE_LIMIT {
        // a local minimum as the incumbent prunes most of the tree
        let (start, start_cost, start_nodes) = descend(&eval, &bounds, s0, horizon);
        let mut search = Search {
            eval: &eval,
            bounds,
            horizon,
            best: start_cost,
            best_actions: start,
            prefix: Vec::new(),
            nodes: start_nodes,
        };
        search.dfs(0, &eval.point(s0), 0.0, 1.0);
        let objective = eval.sequence_cost(s0, &search.best_actions);
        return Ok(OpenLoopPlan { actions: search.best_actions, objective, exact: true, nodes: search.nodes });
    }

    let (actions, best, nodes) = descend(&eval, &bounds, s0, horizon);
    Ok(OpenLoopPlan { actions, objective: best, exact: false, nodes })
}

/// Exact expected cost of a fixed action sequence from cell `s0` under the
/// same surrogate accounting as [`open_loop_plan`].
pub fn sequence_cost(
    kernel: &TransitionKernel,
    cost: &CostTable,
    gamma: f64,
    terminal: &ValueTable,
    s0: usize,
    actions: &[usize],
    big_m: f64,
) -> f64 {
    let eval = Evaluator { kernel, cost, gamma, terminal: terminal.dense(big_m), big_m };
    eval.sequence_cost(s0, actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_stage_cost, energy_cost, BoxConstraints, DEFAULT_BIG_M};
    use crate::grid::{AffineDrift, Grid, NoiseSpec};
    use crate::kernel::build_kernel;
    use crate::solvers::{finite_horizon_dp, Mdp};

    fn small(noise: NoiseSpec) -> (Grid, TransitionKernel, CostTable) {
        let g = Grid::new(0.0, 1.0, 21, -0.25, 0.25, 7).unwrap();
        let k = build_kernel(&g, AffineDrift::additive(), noise);
        let c = build_stage_cost(&g, energy_cost(2.0, 1.0), &BoxConstraints::from_grid(&g)).unwrap();
        (g, k, c)
    }

    fn brute(k: &TransitionKernel, c: &CostTable, t: &ValueTable, s0: usize, n: usize) -> f64 {
        let n_a = k.n_actions();
        let total = n_a.pow(n as u32 + 1);
        (0..total)
            .map(|mut code| {
                let seq: Vec<usize> = (0..=n)
                    .map(|_| {
                        let a = code % n_a;
                        code /= n_a;
                        a
                    })
                    .collect();
                sequence_cost(k, c, 0.9, t, s0, &seq, DEFAULT_BIG_M)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn branch_and_bound_matches_enumeration() {
        let (g, k, c) = small(NoiseSpec::new(0.05, -0.1, 0.1).unwrap());
        let t = ValueTable::zeros(g.n_states);
        for s0 in [2, 10, 18] {
            let plan = open_loop_plan(&k, &c, 0.9, 2, &t, s0, DEFAULT_BIG_M).unwrap();
            assert!(plan.exact);
            assert!((plan.objective - brute(&k, &c, &t, s0, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_plan_is_dp_action() {
        let (g, k, c) = small(NoiseSpec::new(0.05, -0.1, 0.1).unwrap());
        let m = Mdp::new(&k, &c).unwrap();
        let t = ValueTable::zeros(g.n_states);
        let dp = finite_horizon_dp(&m, 0.9, 0, &t).unwrap();
        for s0 in 0..g.n_states {
            if let Some(a) = dp.policies[0].get(s0) {
                let plan = open_loop_plan(&k, &c, 0.9, 0, &t, s0, DEFAULT_BIG_M).unwrap();
                assert_eq!(plan.actions, vec![a]);
            }
        }
    }

    #[test]
    fn plans_never_beat_policies() {
        let (g, k, c) = small(NoiseSpec::new(0.05, -0.1, 0.1).unwrap());
        let m = Mdp::new(&k, &c).unwrap();
        let t = ValueTable::zeros(g.n_states);
        let dp = finite_horizon_dp(&m, 0.9, 3, &t).unwrap();
        for s0 in 0..g.n_states {
            if let Some(v) = dp.values[0].get(s0) {
                let plan = open_loop_plan(&k, &c, 0.9, 3, &t, s0, DEFAULT_BIG_M).unwrap();
                assert!(plan.objective >= v - 1e-12);
            }
        }
    }

    #[test]
    fn coordinate_descent_beyond_limit() {
        let (g, k, c) = small(NoiseSpec::deterministic());
        let t = ValueTable::zeros(g.n_states);
        let plan = open_loop_plan(&k, &c, 0.9, 6, &t, 10, DEFAULT_BIG_M).unwrap();
        assert!(!plan.exact);
        assert_eq!(plan.actions.len(), 7);
        assert_eq!(plan.objective, sequence_cost(&k, &c, 0.9, &t, 10, &plan.actions, DEFAULT_BIG_M));
    }
}
