use std::io::{self, Write};

use crate::grid::Grid;
use crate::kernel::TransitionKernel;
use crate::tables::{fmt_ext, interpolate_with};

/// Violation mass at or above which a conditional-mean model output is
/// flagged as unreliable.
const FLAG_VIOLATION_MASS: f64 = 0.5;

/// Deterministic surrogate `s+ = f(s, a)` tabulated at the grid nodes.
///
/// Outputs are continuous state values. A cell is undefined when the model
/// has no output there and flagged when the output exists but should not be
/// trusted; the MPC engine treats both as unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicModel {
    grid: Grid,
    next_state: Vec<Option<f64>>,
    flagged: Vec<bool>,
}

impl DeterministicModel {
    pub fn new(grid: &Grid, next_state: Vec<Option<f64>>, flagged: Vec<bool>) -> Self {
        assert_eq!(next_state.len(), grid.n_states * grid.n_actions);
        assert_eq!(flagged.len(), next_state.len());
        Self { grid: *grid, next_state, flagged }
    }

    /// Model built from a closure over (state index, action index).
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let next_state = (0..grid.n_states * grid.n_actions).map(|idx| f(idx / grid.n_actions, idx % grid.n_actions)).collect();
        Self { grid: *grid, next_state, flagged: vec![false; grid.n_states * grid.n_actions] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Raw output at a node, ignoring the flag.
    pub fn next_state(&self, s: usize, a: usize) -> Option<f64> {
        self.next_state[s * self.grid.n_actions + a]
    }

    pub fn is_flagged(&self, s: usize, a: usize) -> bool {
        self.flagged[s * self.grid.n_actions + a]
    }

    /// Output at a node when defined and not flagged.
    pub fn usable(&self, s: usize, a: usize) -> Option<f64> {
        if self.is_flagged(s, a) { None } else { self.next_state(s, a) }
    }

    /// Usable output at an arbitrary state, interpolated linearly between
    /// the neighbouring nodes.
    pub fn at(&self, x: f64, a: usize) -> Option<f64> {
        interpolate_with(&self.grid, x, |k| self.usable(k, a))
    }

    pub fn defined_count(&self) -> usize {
        self.next_state.iter().flatten().count()
    }

    pub fn undefined_cells(&self) -> Vec<(usize, usize)> {
        let n_a = self.grid.n_actions;
        (0..self.next_state.len()).filter(|&i| self.next_state[i].is_none()).map(|i| (i / n_a, i % n_a)).collect()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,a_idx,value,defined,flagged")?;
        for s in 0..self.grid.n_states {
            for a in 0..self.grid.n_actions {
                let v = self.next_state(s, a);
                writeln!(out, "{s},{a},{},{},{}", fmt_ext(v), v.is_some() as u8, self.is_flagged(s, a) as u8)?;
            }
        }
        Ok(())
    }
}

/// `f(s,a) = E[s+ | s, a, no violation]`, the conditional mean over grid
/// cells. Rows with all mass on violation are undefined; rows with at least
/// half their mass on violation are flagged.
pub fn expected_value_model(kernel: &TransitionKernel) -> DeterministicModel {
    let grid = *kernel.grid();
    let n = grid.n_states * grid.n_actions;
    let mut next_state = Vec::with_capacity(n);
    let mut flagged = Vec::with_capacity(n);
    for s in 0..grid.n_states {
        for a in 0..grid.n_actions {
            let row = kernel.row(s, a);
            let inside: f64 = row.probs.iter().sum();
            if row.probs.is_empty() || inside <= 0.0 {
                next_state.push(None);
                flagged.push(false);
                continue;
            }
            let m: f64 = row.cells().map(|(k, p)| p * grid.state(k)).sum::<f64>() / inside;
            next_state.push(Some(m));
            flagged.push(row.violation >= FLAG_VIOLATION_MASS);
        }
    }
    DeterministicModel { grid, next_state, flagged }
}

/// `f(s,a)` = centre of the most likely successor cell, lowest index on
/// ties. Undefined only when every bit of mass leaves the grid.
pub fn max_likelihood_model(kernel: &TransitionKernel) -> DeterministicModel {
    let grid = *kernel.grid();
    DeterministicModel::from_fn(&grid, |s, a| {
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in kernel.row(s, a).cells() {
            if p > 0.0 && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((k, p));
            }
        }
        best.map(|(k, _)| grid.state(k))
    })
}
