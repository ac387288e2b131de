//! Scenarios shipped with the binary.

use crate::config::{Override, Scenario};
use crate::error::{CliError, CliResult};

pub struct Builtin {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

pub const BUILTINS: &[Builtin] = &[
    Builtin {
        name: "fig3",
        description: "energy storage: discounted, gain and bias optimal policies with long-run cost comparison",
        text: include_str!("../scenarios/fig3.toml"),
    },
    Builtin {
        name: "fig5",
        description: "energy storage: optimal vs expected-value MPC policies, paired simulation and state distribution",
        text: include_str!("../scenarios/fig5.toml"),
    },
    Builtin {
        name: "fig7",
        description: "absolute-value cost: value kink, delta field, MPC gap and concentration around the centre",
        text: include_str!("../scenarios/fig7.toml"),
    },
    Builtin {
        name: "fig8",
        description: "absolute-value cost: ideal models across a sweep of level offsets",
        text: include_str!("../scenarios/fig8.toml"),
    },
    Builtin {
        name: "quadratic-synthetic",
        description: "contracting linear system with quadratic cost: near-constant delta and MPC verification",
        text: include_str!("../scenarios/quadratic-synthetic.toml"),
    },
    Builtin {
        name: "deterministic-sanity",
        description: "noise-free energy storage: exact MPC recovery and open-loop planning",
        text: include_str!("../scenarios/deterministic-sanity.toml"),
    },
];

pub fn find(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

/// Parses a built-in scenario with overrides applied.
pub fn load(name: &str, overrides: &[Override]) -> CliResult<Scenario> {
    let b = find(name).ok_or_else(|| CliError::Config(format!("unknown built-in scenario `{name}`")))?;
    Scenario::parse_with(b.text, &format!("builtin:{name}"), overrides)
}
