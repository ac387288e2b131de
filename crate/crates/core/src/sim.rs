//! Seeded Monte Carlo simulation of policies against the true kernel.
//!
//! Rollout `i` of a run with seed `seed` draws from a ChaCha8 stream keyed
//! by `(seed, i)`, so results do not depend on thread count or scheduling.
//! Per-rollout values are collected in index order and reduced serially.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::kernel::{sample_transition, TransitionKernel};
use crate::solvers::stationary_distribution;
use crate::tables::{DistributionTable, PolicyTable};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// State-feedback rule on grid indices.
pub trait Policy: Sync {
    fn act(&self, s: usize) -> Option<usize>;
}

impl Policy for PolicyTable {
    fn act(&self, s: usize) -> Option<usize> {
        self.get(s)
    }
}

impl<F: Fn(usize) -> Option<usize> + Sync> Policy for F {
    fn act(&self, s: usize) -> Option<usize> {
        self(s)
    }
}

/// Where rollouts start.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    State(usize),
    /// Probability weights over state indices, sampled by inverse CDF.
    Distribution(Vec<f64>),
}

impl InitialState {
    pub fn uniform(n_states: usize) -> Self {
        Self::Distribution(vec![1.0 / n_states as f64; n_states])
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            Self::State(s) => *s,
            Self::Distribution(w) => {
                let total: f64 = w.iter().sum();
                let u = rng.random::<f64>() * total;
                let mut cum = 0.0;
                for (s, p) in w.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        return s;
                    }
                }
                w.iter().rposition(|&p| p > 0.0).unwrap_or(0)
            }
        }
    }
}

/// Generator for rollout `index` of a run seeded with `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One simulated path. `states` holds `s_0..s_K`, where the last entry is
/// the violation index when `violated` is set; `actions` and `costs` hold
/// the `K` steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub violated: bool,
}

impl Trajectory {
    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        let mut acc = 0.0;
        let mut w = 1.0;
        for c in &self.costs {
            acc += w * c;
            w *= gamma;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub truncation_length: usize,
}

impl RolloutBatch {
    pub fn violation_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.violated).count()
    }

    pub fn write_csv<W: Write>(&self, kernel: &TransitionKernel, mut out: W) -> io::Result<()> {
        let g = kernel.grid();
        writeln!(out, "rollout_id,k,s_idx,s_center,a_center,stage_cost,violated")?;
        for (id, t) in self.trajectories.iter().enumerate() {
            for k in 0..t.actions.len() {
                let s = t.states[k];
                let hit = t.violated && k + 1 == t.actions.len();
                writeln!(
                    out,
                    "{id},{k},{s},{},{},{},{}",
                    g.state(s),
                    g.action(t.actions[k]),
                    t.costs[k],
                    hit as u8
                )?;
            }
        }
        Ok(())
    }
}

/// Simulation settings shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    /// Cost charged once on entering violation; the path then stops.
    pub big_m: f64,
}

/// Walks one path, calling `visit(k, s, a, cost, violated)` per step.
fn walk<R: Rng>(
    kernel: &TransitionKernel,
    cost: Option<&CostTable>,
    policy: &dyn Policy,
    s0: usize,
    horizon: usize,
    big_m: f64,
    rng: &mut R,
    mut visit: impl FnMut(usize, usize, usize, f64, bool),
) -> Result<Option<usize>> {
    let viol = kernel.grid().violation();
    let mut s = s0;
    for k in 0..horizon {
        let a = policy.act(s).ok_or(Error::Simulation { state: s })?;
        if a >= kernel.n_actions() {
            return Err(Error::PolicyInvalid { state: s, action: a });
        }
        let next = sample_transition(kernel, s, a, rng);
        let hit = next == viol;
        let c = match cost {
            Some(table) => {
                let stage = table.get(s, a).ok_or(Error::PolicyInvalid { state: s, action: a })?;
                if hit { stage + big_m } else { stage }
            }
            None => 0.0,
        };
        visit(k, s, a, c, hit);
        if hit {
            return Ok(None);
        }
        s = next;
    }
    Ok(Some(s))
}

/// One trajectory of length `horizon` from `s0` on stream 0 of `seed`.
pub fn rollout(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    s0: usize,
    horizon: usize,
    seed: u64,
    big_m: f64,
) -> Result<Trajectory> {
    let mut rng = rollout_rng(seed, 0);
    trajectory(kernel, cost, policy, s0, horizon, big_m, &mut rng)
}

fn trajectory<R: Rng>(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    s0: usize,
    horizon: usize,
    big_m: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let viol = kernel.grid().violation();
    let mut t = Trajectory { states: vec![s0], actions: Vec::new(), costs: Vec::new(), violated: false };
    let mut s = s0;
    for _ in 0..horizon {
        let a = policy.act(s).ok_or(Error::Simulation { state: s })?;
        if a >= kernel.n_actions() {
            return Err(Error::PolicyInvalid { state: s, action: a });
        }
        let stage = cost.get(s, a).ok_or(Error::PolicyInvalid { state: s, action: a })?;
        let next = sample_transition(kernel, s, a, rng);
        t.actions.push(a);
        t.states.push(next);
        if next == viol {
            t.costs.push(stage + big_m);
            t.violated = true;
            break;
        }
        t.costs.push(stage);
        s = next;
    }
    Ok(t)
}

/// `n_rollouts` trajectories, rollout `i` on stream `i`.
pub fn rollout_batch(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<RolloutBatch> {
    let trajectories = (0..cfg.n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rollout_rng(cfg.seed, i as u64);
            let s0 = init.draw(&mut rng);
            trajectory(kernel, cost, policy, s0, cfg.horizon, cfg.big_m, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { trajectories, seed: cfg.seed, truncation_length: cfg.horizon })
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_rollouts: usize,
    /// `gamma^T max|cost| / (1 - gamma)`; zero for average-cost estimates.
    pub truncation_bias_bound: f64,
    /// Rollouts that ended in the violation state.
    pub violations: usize,
}

impl ReturnEstimate {
    fn from_samples(samples: &[(f64, bool)], truncation_bias_bound: f64) -> Self {
        let x: Vec<f64> = samples.iter().map(|p| p.0).collect();
        let violations = samples.iter().filter(|p| p.1).count();
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n_rollouts: n, truncation_bias_bound, violations }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.mean - Z95 * self.std_error, self.mean + Z95 * self.std_error)
    }

    /// Whether `target` lies within `k` standard errors plus the truncation
    /// bound.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + self.truncation_bias_bound
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        let (lo, hi) = self.ci95();
        writeln!(out, "mean = {}", self.mean)?;
        writeln!(out, "std_error = {}", self.std_error)?;
        writeln!(out, "ci95_lo = {lo}")?;
        writeln!(out, "ci95_hi = {hi}")?;
        writeln!(out, "n_rollouts = {}", self.n_rollouts)?;
        writeln!(out, "truncation_bias_bound = {}", self.truncation_bias_bound)?;
        writeln!(out, "violations = {}", self.violations)
    }
}

fn per_rollout<T: Send>(
    n: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

fn discounted_path<R: Rng>(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    s0: usize,
    gamma: f64,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let mut acc = 0.0;
    let mut w = 1.0;
    let mut violated = false;
    walk(kernel, Some(cost), policy, s0, cfg.horizon, cfg.big_m, rng, |_, _, _, c, hit| {
        acc += w * c;
        w *= gamma;
        violated |= hit;
    })?;
    Ok((acc, violated))
}

/// Monte Carlo estimate of the discounted cost of `policy`, truncated at
/// `cfg.horizon` steps.
pub fn estimate_discounted_return(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    init: &InitialState,
    gamma: f64,
    cfg: &SimConfig,
) -> Result<ReturnEstimate> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::CriterionMismatch(format!("discounted estimate needs gamma in (0, 1), got {gamma}")));
    }
    let samples = per_rollout(cfg.n_rollouts, |i| {
        let mut rng = rollout_rng(cfg.seed, i as u64);
        let s0 = init.draw(&mut rng);
        discounted_path(kernel, cost, policy, s0, gamma, cfg, &mut rng)
    })?;
    let bound = gamma.powi(cfg.horizon as i32) * cost.max_abs() / (1.0 - gamma);
    Ok(ReturnEstimate::from_samples(&samples, bound))
}

/// Monte Carlo estimate of the long-run average cost: each rollout
/// contributes its total cost divided by `cfg.horizon`.
pub fn estimate_average_cost(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy: &dyn Policy,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<ReturnEstimate> {
    let samples = per_rollout(cfg.n_rollouts, |i| {
        let mut rng = rollout_rng(cfg.seed, i as u64);
        let s0 = init.draw(&mut rng);
        let mut acc = 0.0;
        let mut violated = false;
        walk(kernel, Some(cost), policy, s0, cfg.horizon, cfg.big_m, &mut rng, |_, _, _, c, hit| {
            acc += c;
            violated |= hit;
        })?;
        Ok((acc / cfg.horizon as f64, violated))
    })?;
    Ok(ReturnEstimate::from_samples(&samples, 0.0))
}

/// Paired difference `J(a) - J(b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedEstimate {
    pub mean_diff: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_rollouts: usize,
}

impl PairedEstimate {
    /// Whether the 95% interval excludes zero.
    pub fn is_separated(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "mean_diff = {}", self.mean_diff)?;
        writeln!(out, "std_error = {}", self.std_error)?;
        writeln!(out, "ci95_lo = {}", self.ci_lo)?;
        writeln!(out, "ci95_hi = {}", self.ci_hi)?;
        writeln!(out, "n_rollouts = {}", self.n_rollouts)
    }
}

/// Which criterion a comparison measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Discounted(f64),
    Average,
}

/// Paired comparison with common random numbers: rollout `i` of both
/// policies replays the same stream, so identical policies give exactly 0.
pub fn compare_policies(
    kernel: &TransitionKernel,
    cost: &CostTable,
    policy_a: &dyn Policy,
    policy_b: &dyn Policy,
    init: &InitialState,
    metric: Metric,
    cfg: &SimConfig,
) -> Result<PairedEstimate> {
    let eval = |policy: &dyn Policy, i: usize| -> Result<f64> {
        let mut rng = rollout_rng(cfg.seed, i as u64);
        let s0 = init.draw(&mut rng);
        match metric {
            Metric::Discounted(gamma) => Ok(discounted_path(kernel, cost, policy, s0, gamma, cfg, &mut rng)?.0),
            Metric::Average => {
                let mut acc = 0.0;
                walk(kernel, Some(cost), policy, s0, cfg.horizon, cfg.big_m, &mut rng, |_, _, _, c, _| acc += c)?;
                Ok(acc / cfg.horizon as f64)
            }
        }
    };
    let diffs = per_rollout(cfg.n_rollouts, |i| Ok((eval(policy_a, i)? - eval(policy_b, i)?, false)))?;
    let est = ReturnEstimate::from_samples(&diffs, 0.0);
    let (ci_lo, ci_hi) = est.ci95();
    Ok(PairedEstimate { mean_diff: est.mean, std_error: est.std_error, ci_lo, ci_hi, n_rollouts: est.n_rollouts })
}

/// Empirical distribution and its distance to the power-iteration one.
#[derive(Debug, Clone)]
pub struct EmpiricalDistribution {
    pub distribution: DistributionTable,
    /// Total variation to the stationary distribution of the policy, when
    /// that could be computed.
    pub tv_to_stationary: Option<f64>,
}

/// Histogram of states visited at steps `burn_in..horizon` over all
/// rollouts. A path entering violation records it once and stops.
pub fn empirical_state_distribution(
    kernel: &TransitionKernel,
    policy: &PolicyTable,
    s0: usize,
    burn_in: usize,
    cfg: &SimConfig,
) -> Result<EmpiricalDistribution> {
    if burn_in >= cfg.horizon {
        return Err(Error::Config(format!("burn-in {burn_in} must be below the horizon {}", cfg.horizon)));
    }
    let n = kernel.n_states();
    let counts = per_rollout(cfg.n_rollouts, |i| {
        let mut rng = rollout_rng(cfg.seed, i as u64);
        let mut hist = vec![0u64; n + 1];
        walk(kernel, None, policy, s0, cfg.horizon, 0.0, &mut rng, |k, s, _, _, hit| {
            if k >= burn_in {
                hist[s] += 1;
            }
            if hit {
                hist[n] += 1;
            }
        })?;
        Ok(hist)
    })?;
    let mut total = vec![0u64; n + 1];
    for h in &counts {
        for (t, c) in total.iter_mut().zip(h) {
            *t += c;
        }
    }
    let sum: u64 = total.iter().sum();
    let distribution = DistributionTable::new(total.iter().map(|&c| c as f64 / sum.max(1) as f64).collect());
    let tv_to_stationary = stationary_distribution(kernel, policy, 1e-12, 1_000_000)
        .ok()
        .map(|st| st.distribution.total_variation(&distribution));
    Ok(EmpiricalDistribution { distribution, tv_to_stationary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{build_stage_cost, BoxConstraints};
    use crate::grid::{AffineDrift, Grid, NoiseSpec};
    use crate::kernel::build_kernel;

    fn setup(noise: NoiseSpec) -> (Grid, TransitionKernel, CostTable) {
        let g = Grid::new(0.0, 1.0, 41, -0.25, 0.25, 21).unwrap();
        let k = build_kernel(&g, AffineDrift::additive(), noise);
        let c = build_stage_cost(&g, |_, _| 0.4, &BoxConstraints::from_grid(&g)).unwrap();
        (g, k, c)
    }

    fn cfg(horizon: usize, n_rollouts: usize) -> SimConfig {
        SimConfig { horizon, n_rollouts, seed: 7, big_m: 1e4 }
    }

    fn hold(g: &Grid) -> PolicyTable {
        PolicyTable::new(vec![Some(g.n_actions / 2); g.n_states])
    }

    #[test]
    fn deterministic_path_follows_the_model() {
        let (g, k, c) = setup(NoiseSpec::deterministic());
        let up = |s: usize| Some(if s < 30 { 12 } else { 10 });
        let t = rollout(&k, &c, &up, 5, 20, 1, 1e4).unwrap();
        let mut s = 5;
        for (step, &a) in t.actions.iter().enumerate() {
            s = g.locate_state(g.state(s) + g.action(a)).unwrap();
            assert_eq!(t.states[step + 1], s);
        }
        assert!(!t.violated);
        assert_eq!(t, rollout(&k, &c, &up, 5, 20, 1, 1e4).unwrap());
    }

    #[test]
    fn violation_charges_big_m_once_and_stops() {
        let (g, k, c) = setup(NoiseSpec::deterministic());
        let down = |_| Some(0usize);
        let t = rollout(&k, &c, &down, 10, 50, 1, 1e4).unwrap();
        assert!(t.violated);
        assert_eq!(*t.states.last().unwrap(), g.violation());
        assert_eq!(*t.costs.last().unwrap(), 0.4 + 1e4);
        assert!(t.costs[..t.costs.len() - 1].iter().all(|&x| x == 0.4));
    }

    #[test]
    fn undefined_policy_is_a_simulation_error() {
        let (_, k, c) = setup(NoiseSpec::deterministic());
        let none = |s: usize| if s == 20 { None } else { Some(10) };
        assert!(matches!(rollout(&k, &c, &none, 20, 5, 1, 1e4), Err(Error::Simulation { state: 20 })));
    }

    #[test]
    fn constant_cost_matches_geometric_sum() {
        let (_, k, c) = setup(NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        let gamma = 0.9;
        let revert = |s: usize| Some(if s < 20 { 14 } else if s > 20 { 6 } else { 10 });
        let est = estimate_discounted_return(&k, &c, &revert, &InitialState::State(20), gamma, &cfg(200, 100)).unwrap();
        let exact = 0.4 * (1.0 - gamma.powi(200)) / (1.0 - gamma);
        assert!((est.mean - exact).abs() <= est.std_error.max(1e-12));
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let (g, k, c) = setup(NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        let p = hold(&g);
        let d = compare_policies(&k, &c, &p, &p, &InitialState::uniform(g.n_states), Metric::Discounted(0.95), &cfg(100, 50)).unwrap();
        assert_eq!(d.mean_diff, 0.0);
        assert_eq!(d.std_error, 0.0);
    }

    #[test]
    fn serial_and_parallel_runs_agree() {
        let (g, k, _) = setup(NoiseSpec::new(0.1, -0.2, 0.2).unwrap());
        let c = build_stage_cost(&g, |s, a| (s - 0.5).abs() + a * a, &BoxConstraints::from_grid(&g)).unwrap();
        let p = |s: usize| Some(if s < 20 { 14 } else if s > 20 { 6 } else { 10 });
        let run = || estimate_discounted_return(&k, &c, &p, &InitialState::uniform(g.n_states), 0.9, &cfg(300, 64)).unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn absorbing_state_gives_point_mass() {
        let (g, k, _) = setup(NoiseSpec::deterministic());
        let d = empirical_state_distribution(&k, &hold(&g), 17, 3, &cfg(20, 5)).unwrap();
        assert_eq!(d.distribution.mass[17], 1.0);
        assert!(d.tv_to_stationary.is_none() || d.tv_to_stationary.unwrap() <= 1.0);
        assert!(empirical_state_distribution(&k, &hold(&g), 17, 20, &cfg(20, 5)).is_err());
    }

    #[test]
    fn batch_csv_has_one_line_per_step() {
        let (g, k, c) = setup(NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        let b = rollout_batch(&k, &c, &hold(&g), &InitialState::State(20), &cfg(10, 3)).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&k, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 31);
        assert_eq!(b.violation_count(), 0);
    }
}
