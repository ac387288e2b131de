//! Scenario files: TOML with a fixed set of sections and no unknown keys.

use std::fmt;
use std::path::{Path, PathBuf};

use empc_core::cost::QuadraticCost;
use empc_core::grid::{lifetime_to_gamma, AffineDrift, DiscountSpec, Grid, NoiseSpec};
use empc_core::scenario::{CostSpec, MdpSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario: Meta,
    pub grid: GridSection,
    #[serde(default)]
    pub drift: DriftSection,
    pub noise: NoiseSection,
    pub cost: CostSection,
    pub discount: DiscountSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSection>,
    #[serde(default)]
    pub simulation: SimulationSection,
    pub experiments: ExperimentsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub state_lo: f64,
    pub state_hi: f64,
    pub n_states: usize,
    pub action_lo: f64,
    pub action_hi: f64,
    pub n_actions: usize,
}

/// `s+ = state_coeff * s + action_coeff * a + offset + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default = "one")]
    pub state_coeff: f64,
    #[serde(default = "one")]
    pub action_coeff: f64,
    #[serde(default)]
    pub offset: f64,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self { state_coeff: 1.0, action_coeff: 1.0, offset: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub std_dev: f64,
    #[serde(default)]
    pub support_lo: f64,
    #[serde(default)]
    pub support_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CostSection {
    Energy { buy_price: f64, sell_price: f64 },
    Abs { centre: f64 },
    Quadratic { s_ref: f64, a_ref: f64, w_ss: f64, w_sa: f64, w_aa: f64 },
    Constant { value: f64 },
}

/// Either `gamma` directly or a lifetime `n_steps` with `survival_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscountSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_big_m")]
    pub big_m: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: default_tol(), max_iters: default_max_iters(), big_m: default_big_m() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Expected,
    Maxlik,
    Ideal,
}

/// Terminal cost of the MPC problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Terminal {
    Zero,
    VStar,
    /// Value CSV with columns `s_idx,s_center,value`.
    File(PathBuf),
}

impl TryFrom<String> for Terminal {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "zero" => Ok(Self::Zero),
            "vstar" => Ok(Self::VStar),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(format!("terminal must be zero, vstar or file:<path>, got `{s}`")),
            },
        }
    }
}

impl From<Terminal> for String {
    fn from(t: Terminal) -> String {
        match t {
            Terminal::Zero => "zero".into(),
            Terminal::VStar => "vstar".into(),
            Terminal::File(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub model: ModelKind,
    pub horizon: usize,
    /// Defaults to the scenario discount.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub terminal: Terminal,
    #[serde(default)]
    pub tightening: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tightening_max: Option<f64>,
    /// Level offset for the ideal model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
    #[serde(default = "default_level_tol")]
    pub level_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Discounted,
    Gain,
    Bias,
    Mpc,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Discounted => "discounted",
            Self::Gain => "gain",
            Self::Bias => "bias",
            Self::Mpc => "mpc",
        }
    }

    fn producer(self) -> Step {
        match self {
            Self::Discounted => Step::Solve,
            Self::Gain | Self::Bias => Step::Average,
            Self::Mpc => Step::Mpc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Discounted,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub seed: u64,
    /// Rollout length; defaults to `T` with `gamma^T <= 1e-6`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default = "default_rollouts")]
    pub n_rollouts: usize,
    /// Start state index; uniform over the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<usize>,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    /// Policies estimated by the `simulate` step.
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    /// Pairs `[a, b]` compared by the `compare` step as `J(a) - J(b)`.
    #[serde(default)]
    pub compare: Vec<[PolicyKind; 2]>,
    /// Trajectories written to the rollout CSV.
    #[serde(default = "default_export")]
    pub export_rollouts: usize,
    #[serde(default = "default_policy")]
    pub distribution_policy: PolicyKind,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_distribution_horizon")]
    pub distribution_horizon: usize,
    #[serde(default = "default_distribution_rollouts")]
    pub distribution_rollouts: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: None,
            n_rollouts: default_rollouts(),
            initial_state: None,
            metric: default_metric(),
            policies: default_policies(),
            compare: Vec::new(),
            export_rollouts: default_export(),
            distribution_policy: default_policy(),
            burn_in: default_burn_in(),
            distribution_horizon: default_distribution_horizon(),
            distribution_rollouts: default_distribution_rollouts(),
        }
    }
}

/// Pipeline steps, run in the listed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    /// Kernel export.
    Kernel,
    /// Discounted value iteration.
    Solve,
    /// Gain and bias optimal policies.
    Average,
    Mpc,
    /// Delta field, constancy check and MPC verification.
    Delta,
    IdealSweep,
    Simulate,
    Compare,
    Distribution,
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsSection {
    pub run: Vec<Step>,
    /// Central fraction of the state grid used by the delta check.
    #[serde(default = "one")]
    pub interior_fraction: f64,
    /// Relative tolerance of the delta constancy check.
    #[serde(default = "default_check_tol")]
    pub check_tol: f64,
    /// MPC horizons verified against `Q*` by the delta step.
    #[serde(default)]
    pub verify_horizons: Vec<usize>,
    #[serde(default = "default_sweep")]
    pub sweep_count: usize,
    #[serde(default = "default_open_loop_horizon")]
    pub open_loop_horizon: usize,
    #[serde(default = "default_open_loop_stride")]
    pub open_loop_stride: usize,
}

fn one() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iters() -> usize {
    1_000_000
}
fn default_big_m() -> f64 {
    empc_core::cost::DEFAULT_BIG_M
}
fn default_level_tol() -> f64 {
    1e-9
}
fn default_rollouts() -> usize {
    1000
}
fn default_metric() -> MetricKind {
    MetricKind::Discounted
}
fn default_policy() -> PolicyKind {
    PolicyKind::Discounted
}
fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::Discounted]
}
fn default_export() -> usize {
    20
}
fn default_burn_in() -> usize {
    1000
}
fn default_distribution_horizon() -> usize {
    10_000
}
fn default_distribution_rollouts() -> usize {
    200
}
fn default_check_tol() -> f64 {
    0.05
}
fn default_sweep() -> usize {
    21
}
fn default_open_loop_horizon() -> usize {
    3
}
fn default_open_loop_stride() -> usize {
    10
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn toml_error(origin: &str, text: &str, e: &toml::de::Error) -> CliError {
    let msg = e.message().trim();
    match e.span() {
        Some(span) => CliError::Config(format!("{origin}: line {}: {msg}", line_of(text, span.start))),
        None => CliError::Config(format!("{origin}: {msg}")),
    }
}

/// One `--set section.key=value` override. The value is read as a TOML
/// literal and falls back to a bare string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl std::str::FromStr for Override {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (key, raw) =
            s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("override key `{key}` is malformed")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Self { path, value })
    }
}

impl fmt::Display for Override {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.path.join("."), self.value)
    }
}

fn apply_override(table: &mut toml::Table, o: &Override) -> CliResult<()> {
    let (last, parents) = o.path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{o}`: `{p}` is not a section")))?;
    }
    cur.insert(last.clone(), o.value.clone());
    Ok(())
}

impl Scenario {
    /// Parses scenario text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        Self::parse_with(text, origin, &[])
    }

    /// Parses scenario text, applies overrides and validates.
    pub fn parse_with(text: &str, origin: &str, overrides: &[Override]) -> CliResult<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?;
        let scenario = if overrides.is_empty() {
            toml::from_str::<Scenario>(text).map_err(|e| toml_error(origin, text, &e))?
        } else {
            // surface file errors with line numbers before merging
            toml::from_str::<Scenario>(text).map_err(|e| toml_error(origin, text, &e))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            Scenario::deserialize(table).map_err(|e| CliError::Config(format!("{origin} with overrides: {}", e.message().trim())))?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path, overrides: &[Override]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with(&text, &path.display().to_string(), overrides)
    }

    /// Canonical text form; parsing it gives back an identical scenario.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn grid(&self) -> CliResult<Grid> {
        let g = &self.grid;
        Ok(Grid::new(g.state_lo, g.state_hi, g.n_states, g.action_lo, g.action_hi, g.n_actions)
            .map_err(|e| key_error("grid", e))?)
    }

    pub fn noise(&self) -> CliResult<NoiseSpec> {
        let n = &self.noise;
        NoiseSpec::new(n.std_dev, n.support_lo, n.support_hi).map_err(|e| key_error("noise", e))
    }

    pub fn gamma(&self) -> CliResult<f64> {
        let d = &self.discount;
        let spec = match (d.gamma, d.n_steps, d.survival_prob) {
            (Some(g), None, None) => DiscountSpec::new(g),
            (None, Some(n), Some(p)) => lifetime_to_gamma(n, p),
            _ => {
                return Err(CliError::Config(
                    "discount: give either `gamma` or both `n_steps` and `survival_prob`".into(),
                ))
            }
        };
        Ok(spec.map_err(|e| key_error("discount", e))?.gamma)
    }

    pub fn cost_spec(&self) -> CostSpec {
        match self.cost {
            CostSection::Energy { buy_price, sell_price } => CostSpec::Energy { buy: buy_price, sell: sell_price },
            CostSection::Abs { centre } => CostSpec::Abs { centre },
            CostSection::Quadratic { s_ref, a_ref, w_ss, w_sa, w_aa } => {
                CostSpec::Quadratic(QuadraticCost { s_ref, a_ref, w_ss, w_sa, w_aa })
            }
            CostSection::Constant { value } => CostSpec::Constant(value),
        }
    }

    pub fn mdp_spec(&self) -> CliResult<MdpSpec> {
        let d = &self.drift;
        Ok(MdpSpec {
            grid: self.grid()?,
            drift: AffineDrift { state_coeff: d.state_coeff, action_coeff: d.action_coeff, offset: d.offset },
            noise: self.noise()?,
            cost: self.cost_spec(),
            gamma: self.gamma()?,
        })
    }

    /// Checks values and that every step's inputs are produced earlier.
    pub fn validate(&self) -> CliResult<()> {
        let grid = self.grid()?;
        self.noise()?;
        let gamma = self.gamma()?;
        let s = &self.solver;
        if !(s.tol > 0.0) || s.max_iters == 0 || !(s.big_m > 0.0) {
            return Err(CliError::Config("solver: tol, max_iters and big_m must be positive".into()));
        }
        if let CostSection::Quadratic { w_ss, w_aa, .. } = self.cost {
            if !(w_ss.is_finite() && w_aa.is_finite()) {
                return Err(CliError::Config("cost: quadratic weights must be finite".into()));
            }
        }
        let e = &self.experiments;
        if !(e.interior_fraction > 0.0 && e.interior_fraction <= 1.0) {
            return Err(CliError::Config("experiments.interior_fraction must lie in (0, 1]".into()));
        }
        if !(e.check_tol >= 0.0) {
            return Err(CliError::Config("experiments.check_tol must be nonnegative".into()));
        }
        if e.open_loop_stride == 0 {
            return Err(CliError::Config("experiments.open_loop_stride must be positive".into()));
        }
        let sim = &self.simulation;
        if let Some(s0) = sim.initial_state {
            if s0 >= grid.n_states {
                return Err(CliError::Config(format!("simulation.initial_state {s0} is out of range")));
            }
        }
        if sim.n_rollouts == 0 || sim.distribution_rollouts == 0 {
            return Err(CliError::Config("simulation: rollout counts must be positive".into()));
        }
        if sim.metric == MetricKind::Discounted && gamma >= 1.0 {
            return Err(CliError::Config("simulation.metric = discounted needs gamma < 1".into()));
        }
        if let Some(m) = &self.mpc {
            if m.gamma.is_some_and(|g| !(g > 0.0 && g <= 1.0)) {
                return Err(CliError::Config("mpc.gamma must lie in (0, 1]".into()));
            }
            if !(m.tightening >= 0.0) || m.tightening_max.is_some_and(|t| !(t >= 0.0)) {
                return Err(CliError::Config("mpc.tightening must be nonnegative".into()));
            }
            if m.model == ModelKind::Ideal && m.v0.is_none() {
                return Err(CliError::Config("mpc.v0 is required when mpc.model = ideal".into()));
            }
        }

        let mut done: Vec<Step> = Vec::new();
        let need = |done: &[Step], step: Step, what: Step, why: &str| -> CliResult<()> {
            if done.contains(&what) {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "experiments.run: `{}` needs `{}` earlier in the list ({why})",
                    step_name(step),
                    step_name(what)
                )))
            }
        };
        for &step in &e.run {
            match step {
                Step::Kernel | Step::Solve | Step::Average | Step::OpenLoop => {}
                Step::Mpc => {
                    let m = self
                        .mpc
                        .as_ref()
                        .ok_or_else(|| CliError::Config("experiments.run: `mpc` needs an [mpc] section".into()))?;
                    if m.terminal == Terminal::VStar {
                        need(&done, step, Step::Solve, "mpc.terminal = vstar")?;
                    }
                    if m.model == ModelKind::Ideal {
                        need(&done, step, Step::Solve, "mpc.model = ideal")?;
                    }
                }
                Step::Delta | Step::IdealSweep => need(&done, step, Step::Solve, "uses V*")?,
                Step::Simulate => {
                    for p in &sim.policies {
                        need(&done, step, p.producer(), &format!("simulation.policies has `{}`", p.name()))?;
                    }
                }
                Step::Compare => {
                    if sim.compare.is_empty() {
                        return Err(CliError::Config("experiments.run: `compare` needs simulation.compare pairs".into()));
                    }
                    for p in sim.compare.iter().flatten() {
                        need(&done, step, p.producer(), &format!("simulation.compare has `{}`", p.name()))?;
                    }
                }
                Step::Distribution => {
                    let p = sim.distribution_policy;
                    need(&done, step, p.producer(), &format!("simulation.distribution_policy = {}", p.name()))?;
                    if sim.burn_in >= sim.distribution_horizon {
                        return Err(CliError::Config(
                            "simulation.burn_in must be below simulation.distribution_horizon".into(),
                        ));
                    }
                }
            }
            done.push(step);
        }
        if !e.verify_horizons.is_empty() && self.mpc.is_none() {
            return Err(CliError::Config("experiments.verify_horizons needs an [mpc] section".into()));
        }
        Ok(())
    }
}

fn key_error(section: &str, e: empc_core::Error) -> CliError {
    match e {
        empc_core::Error::Config(m) => CliError::Config(format!("{section}: {m}")),
        other => CliError::Config(format!("{section}: {other}")),
    }
}

pub fn step_name(step: Step) -> String {
    toml::Value::try_from(step).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}
