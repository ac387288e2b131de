//! Executes a scenario's step list and writes its artifacts.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use empc_core::analysis::{
    delta_field, ideal_model, theorem1_check, v0_sweep, verify_theorem1_conclusion, DeltaField,
};
use empc_core::cost::CostTable;
use empc_core::grid::{DiscountSpec, Grid};
use empc_core::kernel::TransitionKernel;
use empc_core::mpc::{
    expected_value_model, max_likelihood_model, open_loop_plan, DeterministicModel, MpcProblem, MpcSolver,
};
use empc_core::sim::{
    compare_policies, empirical_state_distribution, estimate_average_cost, estimate_discounted_return, rollout_batch,
    InitialState, Metric, RolloutBatch, SimConfig,
};
use empc_core::solvers::{
    bias_optimal_solve, finite_horizon_dp, relative_value_iteration, value_iteration, DiscountedSolution, Mdp,
};
use empc_core::tables::{DistributionTable, PolicyTable, ValueTable};
use sha2::{Digest, Sha256};

use crate::config::{MetricKind, ModelKind, PolicyKind, Scenario, Step, Terminal};
use crate::error::{CliError, CliResult};
use crate::svg;

pub const MANIFEST: &str = "manifest.txt";
pub const SUMMARY: &str = "summary.txt";
pub const ECHO: &str = "scenario.toml";

/// Rollout length used when the discount does not fix one.
const DEFAULT_SIM_HORIZON: usize = 10_000;

/// Files written by a run, in order, with their SHA-256 digests.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub dir: PathBuf,
    pub artifacts: Vec<(String, String)>,
    pub summary: Vec<(String, String)>,
}

impl RunReport {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Sink {
    dir: PathBuf,
    plots: bool,
    artifacts: Vec<(String, String)>,
    summary: Vec<(String, String)>,
}

impl Sink {
    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push((name.to_owned(), hex_digest(bytes)));
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn plot(&mut self, name: &str, svg: impl FnOnce() -> String) -> CliResult<()> {
        if self.plots {
            self.write(name, svg().as_bytes())?;
        }
        Ok(())
    }

    fn note(&mut self, key: impl Into<String>, value: impl Display) {
        self.summary.push((key.into(), value.to_string()));
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Outputs of earlier steps.
struct State {
    grid: Grid,
    gamma: f64,
    kernel: TransitionKernel,
    cost: CostTable,
    vstar: Option<DiscountedSolution>,
    gain: Option<PolicyTable>,
    bias: Option<PolicyTable>,
    mpc: Option<(PolicyTable, ValueTable)>,
    delta: Option<DeltaField>,
}

impl State {
    fn mdp(&self) -> CliResult<Mdp<'_>> {
        Ok(Mdp::new(&self.kernel, &self.cost)?)
    }

    fn vstar(&self) -> &DiscountedSolution {
        self.vstar.as_ref().expect("validated: solve precedes")
    }

    fn policy(&self, kind: PolicyKind) -> &PolicyTable {
        let p = match kind {
            PolicyKind::Discounted => self.vstar.as_ref().map(|v| &v.policy),
            PolicyKind::Gain => self.gain.as_ref(),
            PolicyKind::Bias => self.bias.as_ref(),
            PolicyKind::Mpc => self.mpc.as_ref().map(|m| &m.0),
        };
        p.expect("validated: producer precedes")
    }
}

/// Default output directory of a scenario.
pub fn default_out_dir(scenario: &Scenario) -> PathBuf {
    scenario.scenario.output.clone().unwrap_or_else(|| PathBuf::from("out").join(&scenario.scenario.name))
}

/// Runs every step of `scenario`, writing artifacts, `summary.txt`, the
/// echoed scenario and `manifest.txt` into `out`.
pub fn run(scenario: &Scenario, out: &Path, plots: bool) -> CliResult<RunReport> {
    scenario.validate()?;
    fs::create_dir_all(out)?;
    let spec = scenario.mdp_spec()?;
    let mut sink = Sink { dir: out.to_path_buf(), plots, artifacts: Vec::new(), summary: Vec::new() };
    sink.note("scenario", &scenario.scenario.name);
    sink.note("seed", scenario.simulation.seed);
    sink.note("gamma", spec.gamma);
    sink.write(ECHO, scenario.to_text().as_bytes())?;

    let mut st = State {
        grid: spec.grid,
        gamma: spec.gamma,
        kernel: spec.kernel(),
        cost: spec.cost_table()?,
        vstar: None,
        gain: None,
        bias: None,
        mpc: None,
        delta: None,
    };
    for &step in &scenario.experiments.run {
        match step {
            Step::Kernel => sink.write_with("kernel.csv", |b| st.kernel.write_csv(b))?,
            Step::Solve => solve(scenario, &mut st, &mut sink)?,
            Step::Average => average(scenario, &mut st, &mut sink)?,
            Step::Mpc => mpc(scenario, &mut st, &mut sink)?,
            Step::Delta => delta(scenario, &mut st, &mut sink)?,
            Step::IdealSweep => sweep(scenario, &mut st, &mut sink)?,
            Step::Simulate => simulate(scenario, &st, &mut sink)?,
            Step::Compare => compare(scenario, &st, &mut sink)?,
            Step::Distribution => distribution(scenario, &st, &mut sink)?,
            Step::OpenLoop => open_loop(scenario, &st, &mut sink)?,
        }
    }
    plots_of(&st, &mut sink)?;

    let mut text = String::new();
    for (k, v) in &sink.summary {
        text.push_str(&format!("{k} = {v}\n"));
    }
    sink.write(SUMMARY, text.as_bytes())?;

    let mut manifest = format!("# scenario = {}\n# seed = {}\n", scenario.scenario.name, scenario.simulation.seed);
    for (name, hash) in &sink.artifacts {
        manifest.push_str(&format!("{hash}  {name}\n"));
    }
    fs::write(out.join(MANIFEST), manifest)?;
    Ok(RunReport { dir: out.to_path_buf(), artifacts: sink.artifacts, summary: sink.summary })
}

fn solve(sc: &Scenario, st: &mut State, sink: &mut Sink) -> CliResult<()> {
    let mdp = st.mdp()?;
    let sol = value_iteration(&mdp, st.gamma, sc.solver.tol, sc.solver.max_iters)?;
    sink.note("vi_iterations", sol.iterations);
    sink.note("vi_residual", sol.residual);
    sink.note("feasible_states", sol.values.finite_count());
    let g = st.grid;
    sink.write_with("value_discounted.csv", |b| sol.values.write_csv(&g, b))?;
    sink.write_with("q_discounted.csv", |b| sol.q.write_csv(&g, b))?;
    sink.write_with("policy_discounted.csv", |b| sol.policy.write_csv(&g, b))?;
    st.vstar = Some(sol);
    Ok(())
}

fn average(sc: &Scenario, st: &mut State, sink: &mut Sink) -> CliResult<()> {
    let mdp = st.mdp()?;
    let gain = relative_value_iteration(&mdp, sc.solver.tol, sc.solver.max_iters, None)?;
    let bias = bias_optimal_solve(&mdp, &gain, sc.solver.tol, sc.solver.max_iters)?;
    let bias_policy =
        bias.bias_policy.clone().ok_or_else(|| CliError::Solver("bias stage produced no policy".into()))?;
    let g = st.grid;
    sink.note("gain", gain.gain);
    sink.note("gain_periodic", gain.periodic);
    sink.note("bias_ties", bias.bias_ties.len());
    sink.note("gain_bias_disagreements", gain.gain_policy.disagreements(&bias_policy));
    if let Some(v) = &st.vstar {
        sink.note("gain_discounted_disagreements", gain.gain_policy.disagreements(&v.policy));
        sink.note("bias_discounted_disagreements", bias_policy.disagreements(&v.policy));
    }
    sink.write_with("policy_gain.csv", |b| gain.gain_policy.write_csv(&g, b))?;
    sink.write_with("policy_bias.csv", |b| bias_policy.write_csv(&g, b))?;
    sink.write_with("bias.csv", |b| bias.bias.write_csv(&g, b))?;
    st.gain = Some(gain.gain_policy);
    st.bias = Some(bias_policy);
    Ok(())
}

fn read_value_csv(path: &Path, n_states: usize) -> CliResult<ValueTable> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("mpc.terminal: cannot read {}: {e}", path.display())))?;
    let mut values = vec![None; n_states];
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Config(format!("mpc.terminal: {}: line {}: expected s_idx,s_center,value", path.display(), i + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        let s: usize = cols[0].parse().map_err(|_| bad())?;
        if s >= n_states {
            return Err(bad());
        }
        values[s] = match cols[2] {
            "inf" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad())?),
        };
    }
    Ok(ValueTable::new(values))
}

fn mpc_gamma(sc: &Scenario, st: &State) -> f64 {
    sc.mpc.as_ref().and_then(|m| m.gamma).unwrap_or(st.gamma)
}

/// Model used by the delta and verification steps.
fn analysis_model(sc: &Scenario, st: &State) -> DeterministicModel {
    match sc.mpc.as_ref().map(|m| m.model) {
        Some(ModelKind::Maxlik) => max_likelihood_model(&st.kernel),
        _ => expected_value_model(&st.kernel),
    }
}

fn mpc(sc: &Scenario, st: &mut State, sink: &mut Sink) -> CliResult<()> {
    let m = sc.mpc.as_ref().expect("validated: mpc section");
    let model = match m.model {
        ModelKind::Expected => expected_value_model(&st.kernel),
        ModelKind::Maxlik => max_likelihood_model(&st.kernel),
        ModelKind::Ideal => {
            let rep = ideal_model(&st.kernel, &st.vstar().values, m.v0.expect("validated"), m.level_tol);
            sink.note("mpc_ideal_undefined_cells", rep.undefined_cells.len());
            sink.note("mpc_ideal_discontinuity_cells", rep.discontinuity_cells.len());
            rep.model
        }
    };
    let terminal = match &m.terminal {
        Terminal::Zero => ValueTable::zeros(st.grid.n_states),
        Terminal::VStar => st.vstar().values.clone(),
        Terminal::File(p) => read_value_csv(p, st.grid.n_states)?,
    };
    let problem = MpcProblem::new(&model, &st.cost, m.horizon, mpc_gamma(sc, st), terminal)
        .with_tightening(m.tightening, m.tightening_max.unwrap_or(f64::INFINITY));
    let (pi, v, q) = MpcSolver::new(problem)?.policy_table();
    let g = st.grid;
    sink.note("mpc_feasible_states", v.finite_count());
    if let Some(vs) = &st.vstar {
        let d = pi.disagreements(&vs.policy);
        sink.note("mpc_disagreements", d);
        sink.note("mpc_disagreement_fraction", d as f64 / g.n_states as f64);
    }
    sink.write_with("model.csv", |b| model.write_csv(b))?;
    sink.write_with("policy_mpc.csv", |b| pi.write_csv(&g, b))?;
    sink.write_with("value_mpc.csv", |b| v.write_csv(&g, b))?;
    sink.write_with("q_mpc.csv", |b| q.write_csv(&g, b))?;
    st.mpc = Some((pi, v));
    Ok(())
}

/// Central `fraction` of the state indices.
fn interior(grid: &Grid, fraction: f64) -> impl Fn(usize, usize) -> bool + Copy {
    let n = grid.n_states;
    let margin = ((1.0 - fraction) * n as f64 / 2.0).round() as usize;
    let (lo, hi) = (margin, n - margin.min(n));
    move |s, _| s >= lo && s < hi
}

fn delta(sc: &Scenario, st: &mut State, sink: &mut Sink) -> CliResult<()> {
    let e = &sc.experiments;
    let model = analysis_model(sc, st);
    let field = delta_field(&st.kernel, &st.cost, &st.vstar().values, &model, sc.solver.big_m);
    let region = interior(&st.grid, e.interior_fraction);
    sink.write_with("delta.csv", |b| field.write_csv(b))?;
    let summary = field.summary(region);
    let check = match theorem1_check(&field, region, 0.0) {
        Ok(c) => c,
        Err(empc_core::Error::Config(_)) => {
            sink.note("delta_cells", 0);
            st.delta = Some(field);
            return Ok(());
        }
        Err(other) => return Err(other.into()),
    };
    let tol = e.check_tol * check.v0_hat.abs();
    let constant = check.max_deviation <= tol;
    let mut text = String::new();
    if let Some(s) = summary {
        for (k, v) in [("count", s.count as f64), ("mean", s.mean), ("std", s.std), ("min", s.min), ("max", s.max)] {
            text.push_str(&format!("{k} = {v}\n"));
        }
    }
    text.push_str(&format!(
        "v0_hat = {}\nmax_deviation = {}\ntolerance = {tol}\nconstant = {constant}\n",
        check.v0_hat, check.max_deviation
    ));
    sink.note("delta_cells", check.count);
    sink.note("delta_v0_hat", check.v0_hat);
    sink.note("delta_max_deviation", check.max_deviation);
    sink.note("delta_constant", constant);

    if !e.verify_horizons.is_empty() {
        let vs = st.vstar();
        let range = vs.q.finite_range();
        for &n in &e.verify_horizons {
            let problem = MpcProblem::new(&model, &st.cost, n, mpc_gamma(sc, st), vs.values.clone());
            let solver = MpcSolver::new(problem)?;
            let r = verify_theorem1_conclusion(&solver, check.v0_hat, &vs.q, region);
            let rel = if range > 0.0 { r.discrepancy / range } else { r.discrepancy };
            text.push_str(&format!(
                "verify_{n}_discrepancy = {}\nverify_{n}_relative = {rel}\nverify_{n}_q0_fit = {}\nverify_{n}_q0_theory = {}\nverify_{n}_mask_mismatches = {}\n",
                r.discrepancy, r.q0_fit, r.q0_theory, r.mask_mismatches
            ));
            sink.note(format!("verify_{n}_relative"), rel);
        }
    }
    sink.write("delta_summary.txt", text.as_bytes())?;
    st.delta = Some(field);
    Ok(())
}

fn sweep(sc: &Scenario, st: &mut State, sink: &mut Sink) -> CliResult<()> {
    let e = &sc.experiments;
    if st.delta.is_none() {
        let model = analysis_model(sc, st);
        st.delta = Some(delta_field(&st.kernel, &st.cost, &st.vstar().values, &model, sc.solver.big_m));
    }
    let field = st.delta.as_ref().expect("just set");
    let values = field.defined_values();
    if values.is_empty() {
        return Err(CliError::Solver("ideal-sweep: the delta field is undefined everywhere".into()));
    }
    let v0s = v0_sweep(&values, e.sweep_count);
    let vs = st.vstar();
    let range = vs.q.finite_range();
    let (horizon, level_tol) = sc.mpc.as_ref().map_or((10, 1e-9), |m| (m.horizon, m.level_tol));
    let gamma = mpc_gamma(sc, st);
    let mut table = String::from("index,v0,undefined_cells,discontinuity_cells,excluded,fully_defined,continuous,relative_discrepancy\n");
    let (mut n_undefined, mut n_discontinuous, mut n_verified) = (0, 0, 0);
    for (i, &v0) in v0s.iter().enumerate() {
        let rep = ideal_model(&st.kernel, &vs.values, v0, level_tol);
        sink.write_with(&format!("ideal_model_{i:02}.csv"), |b| rep.model.write_csv(b))?;
        let mut flags = String::from("s_idx,a_idx,kind\n");
        for (s, a) in &rep.undefined_cells {
            flags.push_str(&format!("{s},{a},undefined\n"));
        }
        for (s, a) in &rep.discontinuity_cells {
            flags.push_str(&format!("{s},{a},discontinuity\n"));
        }
        sink.write(&format!("ideal_flags_{i:02}.csv"), flags.as_bytes())?;
        let rel = if rep.is_fully_defined() {
            let problem = MpcProblem::new(&rep.model, &st.cost, horizon, gamma, vs.values.clone());
            let r = verify_theorem1_conclusion(&MpcSolver::new(problem)?, v0, &vs.q, |_, _| true);
            Some(if range > 0.0 { r.discrepancy / range } else { r.discrepancy })
        } else {
            None
        };
        n_undefined += usize::from(!rep.undefined_cells.is_empty());
        n_discontinuous += usize::from(!rep.is_continuous());
        n_verified += usize::from(rel.is_some_and(|r| r <= 5e-3));
        table.push_str(&format!(
            "{i},{v0},{},{},{},{},{},{}\n",
            rep.undefined_cells.len(),
            rep.discontinuity_cells.len(),
            rep.excluded,
            u8::from(rep.is_fully_defined()),
            u8::from(rep.is_continuous()),
            rel.map_or("na".to_string(), |r| r.to_string())
        ));
    }
    sink.write("ideal_sweep.csv", table.as_bytes())?;
    sink.note("sweep_with_undefined", n_undefined);
    sink.note("sweep_with_discontinuities", n_discontinuous);
    sink.note("sweep_verified", n_verified);
    Ok(())
}

fn sim_config(sc: &Scenario, st: &State) -> SimConfig {
    let sim = &sc.simulation;
    let horizon = sim.horizon.unwrap_or_else(|| {
        if st.gamma < 1.0 {
            DiscountSpec { gamma: st.gamma }.truncation_horizon(6.0)
        } else {
            DEFAULT_SIM_HORIZON
        }
    });
    SimConfig { horizon, n_rollouts: sim.n_rollouts, seed: sim.seed, big_m: sc.solver.big_m }
}

fn initial(sc: &Scenario, st: &State) -> InitialState {
    match sc.simulation.initial_state {
        Some(s) => InitialState::State(s),
        None => InitialState::uniform(st.grid.n_states),
    }
}

fn metric(sc: &Scenario, st: &State) -> Metric {
    match sc.simulation.metric {
        MetricKind::Discounted => Metric::Discounted(st.gamma),
        MetricKind::Average => Metric::Average,
    }
}

fn simulate(sc: &Scenario, st: &State, sink: &mut Sink) -> CliResult<()> {
    let cfg = sim_config(sc, st);
    let init = initial(sc, st);
    sink.note("sim_horizon", cfg.horizon);
    for &kind in &sc.simulation.policies {
        let policy = st.policy(kind);
        let est = match metric(sc, st) {
            Metric::Discounted(g) => estimate_discounted_return(&st.kernel, &st.cost, policy, &init, g, &cfg)?,
            Metric::Average => estimate_average_cost(&st.kernel, &st.cost, policy, &init, &cfg)?,
        };
        let name = kind.name();
        sink.write_with(&format!("estimate_{name}.txt"), |b| est.write_text(b))?;
        sink.note(format!("{name}_mean"), est.mean);
        sink.note(format!("{name}_std_error"), est.std_error);
        sink.note(format!("{name}_violations"), est.violations);
        let export = SimConfig { n_rollouts: sc.simulation.export_rollouts.min(cfg.n_rollouts), ..cfg };
        if export.n_rollouts > 0 {
            let batch: RolloutBatch = rollout_batch(&st.kernel, &st.cost, policy, &init, &export)?;
            sink.write_with(&format!("rollouts_{name}.csv"), |b| batch.write_csv(&st.kernel, b))?;
        }
    }
    Ok(())
}

fn compare(sc: &Scenario, st: &State, sink: &mut Sink) -> CliResult<()> {
    let cfg = sim_config(sc, st);
    let init = initial(sc, st);
    for [a, b] in &sc.simulation.compare {
        let d = compare_policies(&st.kernel, &st.cost, st.policy(*a), st.policy(*b), &init, metric(sc, st), &cfg)?;
        let tag = format!("{}_vs_{}", a.name(), b.name());
        sink.write_with(&format!("compare_{tag}.txt"), |w| d.write_text(w))?;
        sink.note(format!("{tag}_mean_diff"), d.mean_diff);
        sink.note(format!("{tag}_ci95_lo"), d.ci_lo);
        sink.note(format!("{tag}_ci95_hi"), d.ci_hi);
        sink.note(format!("{tag}_separated"), d.is_separated());
    }
    Ok(())
}

fn distribution(sc: &Scenario, st: &State, sink: &mut Sink) -> CliResult<()> {
    let sim = &sc.simulation;
    let policy = st.policy(sim.distribution_policy);
    let s0 = match sim.initial_state {
        Some(s) => s,
        None => (0..st.grid.n_states)
            .map(|k| (st.grid.n_states / 2 + k) % st.grid.n_states)
            .find(|&s| policy.get(s).is_some())
            .ok_or_else(|| CliError::Solver("distribution: policy is undefined everywhere".into()))?,
    };
    let cfg = SimConfig {
        horizon: sim.distribution_horizon,
        n_rollouts: sim.distribution_rollouts,
        seed: sim.seed,
        big_m: sc.solver.big_m,
    };
    let emp = empirical_state_distribution(&st.kernel, policy, s0, sim.burn_in, &cfg)?;
    let d = &emp.distribution;
    let g = st.grid;
    sink.write_with("distribution.csv", |b| d.write_csv(&g, b))?;
    sink.plot("distribution.svg", || svg::line_chart("empirical state distribution", &[("mass", distribution_series(&g, d))]))?;
    sink.note("distribution_start", s0);
    sink.note("distribution_violation_mass", d.violation_mass());
    sink.note("distribution_max_cell_mass", d.max_cell_mass());
    sink.note("distribution_max_window_mass", max_window_mass(d, &g));
    sink.note("distribution_mean", d.mean(&g));
    match emp.tv_to_stationary {
        Some(tv) => sink.note("distribution_tv_to_stationary", tv),
        None => sink.note("distribution_tv_to_stationary", "na"),
    }
    Ok(())
}

/// Largest mass inside any window one cell wide, sliding over cell edges:
/// with a cell-centred grid such a window covers exactly one cell.
pub fn max_window_mass(d: &DistributionTable, grid: &Grid) -> f64 {
    (0..grid.n_states).map(|s| d.mass_near(grid, grid.state(s), 0.5 * grid.state_width())).fold(0.0, f64::max)
}

fn open_loop(sc: &Scenario, st: &State, sink: &mut Sink) -> CliResult<()> {
    let e = &sc.experiments;
    let mdp = st.mdp()?;
    let zero = ValueTable::zeros(st.grid.n_states);
    let n = e.open_loop_horizon;
    let dp = finite_horizon_dp(&mdp, st.gamma, n, &zero)?;
    let mut text = String::from("s_idx,s_center,plan_objective,dp_value,gap,exact\n");
    let (mut tested, mut strict, mut below) = (0, 0, 0);
    for s in (0..st.grid.n_states).step_by(e.open_loop_stride) {
        let Some(v) = dp.values[0].get(s) else { continue };
        let plan = open_loop_plan(&st.kernel, &st.cost, st.gamma, n, &zero, s, sc.solver.big_m)?;
        let gap = plan.objective - v;
        tested += 1;
        strict += usize::from(gap > 1e-9 * (1.0 + v.abs()));
        below += usize::from(gap < -1e-9 * (1.0 + v.abs()));
        text.push_str(&format!("{s},{},{},{v},{gap},{}\n", st.grid.state(s), plan.objective, u8::from(plan.exact)));
    }
    sink.write("open_loop.csv", text.as_bytes())?;
    sink.note("open_loop_tested", tested);
    sink.note("open_loop_strict", strict);
    sink.note("open_loop_below_dp", below);
    Ok(())
}

fn value_series(grid: &Grid, v: &ValueTable) -> Vec<(f64, f64)> {
    (0..grid.n_states).map(|s| (grid.state(s), v.get(s).unwrap_or(f64::INFINITY))).collect()
}

fn policy_series(grid: &Grid, p: &PolicyTable) -> Vec<(f64, f64)> {
    (0..grid.n_states).map(|s| (grid.state(s), p.get(s).map_or(f64::INFINITY, |a| grid.action(a)))).collect()
}

fn plots_of(st: &State, sink: &mut Sink) -> CliResult<()> {
    let g = st.grid;
    let mut values = Vec::new();
    let mut policies = Vec::new();
    if let Some(v) = &st.vstar {
        values.push(("V* (discounted)", value_series(&g, &v.values)));
        policies.push(("discounted", policy_series(&g, &v.policy)));
    }
    if let Some((p, v)) = &st.mpc {
        values.push(("V MPC", value_series(&g, v)));
        policies.push(("mpc", policy_series(&g, p)));
    }
    if let Some(p) = &st.gain {
        policies.push(("gain", policy_series(&g, p)));
    }
    if let Some(p) = &st.bias {
        policies.push(("bias", policy_series(&g, p)));
    }
    if !values.is_empty() {
        sink.plot("values.svg", || svg::line_chart("value functions", &values))?;
        sink.plot("policies.svg", || svg::line_chart("policies (action vs state)", &policies))?;
    }
    if let Some(d) = &st.delta {
        let rows: Vec<Vec<f64>> = (0..g.n_actions)
            .map(|a| (0..g.n_states).map(|s| d.get(s, a).filter(|_| !d.is_flagged(s, a)).unwrap_or(f64::NAN)).collect())
            .collect();
        sink.plot("delta.svg", || svg::heatmap("delta field (actions up, states right)", &rows))?;
    }
    Ok(())
}

fn distribution_series(grid: &Grid, d: &DistributionTable) -> Vec<(f64, f64)> {
    (0..grid.n_states).map(|s| (grid.state(s), d.mass[s])).collect()
}
