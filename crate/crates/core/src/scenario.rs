//! Problem definitions assembled from plain parameters, and the presets
//! used by the reproduction experiments.

use crate::cost::{abs_cost, build_stage_cost, energy_cost, BoxConstraints, CostTable, QuadraticCost};
use crate::error::Result;
use crate::grid::{AffineDrift, Grid, NoiseSpec};
use crate::kernel::{build_kernel, TransitionKernel};

/// Stage-cost families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostSpec {
    /// `sell * a` when selling (`a <= 0`), `buy * a` when buying.
    Energy { buy: f64, sell: f64 },
    /// `|s - centre| + |a|`.
    Abs { centre: f64 },
    Quadratic(QuadraticCost),
    Constant(f64),
}

impl CostSpec {
    pub fn eval(&self, s: f64, a: f64) -> f64 {
        match *self {
            Self::Energy { buy, sell } => energy_cost(buy, sell)(s, a),
            Self::Abs { centre } => abs_cost(centre)(s, a),
            Self::Quadratic(q) => q.eval(s, a),
            Self::Constant(c) => c,
        }
    }
}

/// Everything needed to build the tabular MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpSpec {
    pub grid: Grid,
    pub drift: AffineDrift,
    pub noise: NoiseSpec,
    pub cost: CostSpec,
    pub gamma: f64,
}

impl MdpSpec {
    pub fn kernel(&self) -> TransitionKernel {
        build_kernel(&self.grid, self.drift, self.noise)
    }

    pub fn cost_table(&self) -> Result<CostTable> {
        build_stage_cost(&self.grid, |s, a| self.cost.eval(s, a), &BoxConstraints::from_grid(&self.grid))
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }
}

fn default_grid(state_lo: f64, state_hi: f64) -> Grid {
    Grid::new(state_lo, state_hi, 201, -0.25, 0.25, 101).expect("preset grid is valid")
}

/// Energy storage: `s+ = s + a + w` on `[0, 1]`, `w` with std 0.05
/// truncated to `[-0.05, 0.05]`, buying at twice the selling price.
pub fn energy_storage() -> MdpSpec {
    MdpSpec {
        grid: default_grid(0.0, 1.0),
        drift: AffineDrift::additive(),
        noise: NoiseSpec::new(0.05, -0.05, 0.05).expect("preset noise is valid"),
        cost: CostSpec::Energy { buy: 2.0, sell: 1.0 },
        gamma: 0.99,
    }
}

/// Non-smooth cost `|s - 1/2| + |a|` with std 0.1 noise truncated to
/// `[-0.25, 0.25]`.
pub fn abs_cost_scenario() -> MdpSpec {
    MdpSpec {
        grid: default_grid(0.0, 1.0),
        drift: AffineDrift::additive(),
        noise: NoiseSpec::new(0.1, -0.25, 0.25).expect("preset noise is valid"),
        cost: CostSpec::Abs { centre: 0.5 },
        gamma: 0.99,
    }
}

/// Stochastic LQR-like problem: contracting drift `0.8 s + a`, cost
/// `s^2 + a^2`, std 0.05 noise truncated to `[-0.15, 0.15]`, action bounds
/// wide enough never to bind.
pub fn near_lqr() -> MdpSpec {
    MdpSpec {
        grid: Grid::new(-1.0, 1.0, 201, -1.0, 1.0, 101).expect("preset grid is valid"),
        drift: AffineDrift { state_coeff: 0.8, action_coeff: 1.0, offset: 0.0 },
        noise: NoiseSpec::new(0.05, -0.15, 0.15).expect("preset noise is valid"),
        cost: CostSpec::Quadratic(QuadraticCost { s_ref: 0.0, a_ref: 0.0, w_ss: 2.0, w_sa: 0.0, w_aa: 2.0 }),
        gamma: 0.99,
    }
}

/// Energy storage without noise.
pub fn deterministic_energy() -> MdpSpec {
    energy_storage().with_noise(NoiseSpec::deterministic())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for spec in [energy_storage(), abs_cost_scenario(), near_lqr(), deterministic_energy()] {
            let k = spec.kernel();
            let c = spec.cost_table().unwrap();
            assert_eq!(k.n_states(), 201);
            assert_eq!(c.n_actions(), spec.grid.n_actions);
        }
        let e = energy_storage();
        assert_eq!(e.cost.eval(0.3, -0.1), -0.1);
        assert_eq!(e.cost.eval(0.3, 0.1), 0.2);
        assert_eq!(abs_cost_scenario().cost.eval(0.5, 0.0), 0.0);
    }
}
