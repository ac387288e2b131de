//! Stage-cost tables with explicit feasibility masks.
//!
//! An infeasible entry stands for an infinite penalty. It is stored as
//! `None` and never enters floating-point arithmetic.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Default finite surrogate for the violation penalty, used only where a
/// finite scalar is required (Monte Carlo returns, open-loop planning).
pub const DEFAULT_BIG_M: f64 = 1e4;

/// Inclusive box constraints on state and action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxConstraints {
    pub state_lo: f64,
    pub state_hi: f64,
    pub action_lo: f64,
    pub action_hi: f64,
}

impl BoxConstraints {
    /// The grid's own bounds.
    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            state_lo: grid.state_lo,
            state_hi: grid.state_hi,
            action_lo: grid.action_lo,
            action_hi: grid.action_hi,
        }
    }

    pub fn contains(&self, s: f64, a: f64) -> bool {
        s >= self.state_lo && s <= self.state_hi && a >= self.action_lo && a <= self.action_hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    n_states: usize,
    n_actions: usize,
    cost: Vec<Option<f64>>,
    /// Cost of the absorbing violation state; `None` is the masked infinity.
    pub violation_cost: Option<f64>,
}

pub fn build_stage_cost(
    grid: &Grid,
    cost_fn: impl Fn(f64, f64) -> f64,
    feasibility: &BoxConstraints,
) -> Result<CostTable> {
    let mut cost = Vec::with_capacity(grid.n_states * grid.n_actions);
    for i in 0..grid.n_states {
        let s = grid.state(i);
        for j in 0..grid.n_actions {
            let a = grid.action(j);
            if !feasibility.contains(s, a) {
                cost.push(None);
                continue;
            }
            let c = cost_fn(s, a);
            if !c.is_finite() {
                return Err(Error::Data(format!("stage cost is {c} at feasible cell ({i}, {j})")));
            }
            cost.push(Some(c));
        }
    }
    Ok(CostTable { n_states: grid.n_states, n_actions: grid.n_actions, cost, violation_cost: None })
}

impl CostTable {
    pub fn from_entries(n_states: usize, n_actions: usize, cost: Vec<Option<f64>>) -> Result<Self> {
        if cost.len() != n_states * n_actions {
            return Err(Error::Data(format!(
                "cost table needs {} entries, got {}",
                n_states * n_actions,
                cost.len()
            )));
        }
        if cost.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Data("finite cost entries must be finite".into()));
        }
        Ok(Self { n_states, n_actions, cost, violation_cost: None })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        if s == self.n_states {
            return self.violation_cost;
        }
        self.cost[s * self.n_actions + a]
    }

    pub fn is_feasible(&self, s: usize, a: usize) -> bool {
        self.get(s, a).is_some()
    }

    pub fn entries(&self) -> &[Option<f64>] {
        &self.cost
    }

    /// Largest absolute finite cost.
    pub fn max_abs(&self) -> f64 {
        self.cost.iter().flatten().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    /// Smallest finite cost, if any.
    pub fn min_finite(&self) -> Option<f64> {
        self.cost.iter().flatten().copied().reduce(f64::min)
    }

    /// The same table with `offset` added to every finite entry.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            cost: self.cost.iter().map(|c| c.map(|c| c + offset)).collect(),
            ..self.clone()
        }
    }
}

/// Energy-storage cost: selling earns `sell_price` per unit, buying costs
/// `buy_price` per unit.
pub fn energy_cost(buy_price: f64, sell_price: f64) -> impl Fn(f64, f64) -> f64 {
    move |_s, a| if a <= 0.0 { sell_price * a } else { buy_price * a }
}

/// Non-smooth cost `|s - centre| + |a|`.
pub fn abs_cost(centre: f64) -> impl Fn(f64, f64) -> f64 {
    move |s, a| (s - centre).abs() + a.abs()
}

/// Quadratic tracking cost `0.5 [ds, da] W [ds, da]^T` around a reference
/// pair, `W = [[w_ss, w_sa], [w_sa, w_aa]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCost {
    pub s_ref: f64,
    pub a_ref: f64,
    pub w_ss: f64,
    pub w_sa: f64,
    pub w_aa: f64,
}

impl QuadraticCost {
    pub fn eval(&self, s: f64, a: f64) -> f64 {
        let ds = s - self.s_ref;
        let da = a - self.a_ref;
        0.5 * (self.w_ss * ds * ds + 2.0 * self.w_sa * ds * da + self.w_aa * da * da)
    }

    /// Smallest eigenvalue of the weight matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        let tr = self.w_ss + self.w_aa;
        let det = self.w_ss * self.w_aa - self.w_sa * self.w_sa;
        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
    }
}
